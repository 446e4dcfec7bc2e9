// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_SANPEFT_HPP
#define SANPEFT_SANPEFT_HPP

#include <sanpeft/adapters.hpp>
#include <sanpeft/checkpoint.hpp>
#include <sanpeft/config.hpp>
#include <sanpeft/data.hpp>
#include <sanpeft/errors.hpp>
#include <sanpeft/gradcheck.hpp>
#include <sanpeft/model.hpp>
#include <sanpeft/ndarray.hpp>
#include <sanpeft/optim.hpp>
#include <sanpeft/reparam.hpp>
#include <sanpeft/serialize.hpp>
#include <sanpeft/tensor.hpp>
#include <sanpeft/train.hpp>

#endif  // SANPEFT_SANPEFT_HPP

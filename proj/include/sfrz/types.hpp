// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <vector>

namespace sfrz {

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VecXd = VecX<double>;
using RowMatXd = RowMatX<double>;

using MatMap = Eigen::Map<RowMatXd>;
using ConstMatMap = Eigen::Map<const RowMatXd>;

using Shape = std::vector<std::size_t>;
using TokenSeq = std::vector<int>;

}  // namespace sfrz

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace fpcnet::stats {

inline double mean(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Nearest-rank quantile of an ascending-sorted list: element ceil(p*n) - 1,
/// clamped to the valid range.
inline double nearest_rank(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty list");
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::ptrdiff_t>(std::ceil(p * n)) - 1;
  rank = std::clamp<std::ptrdiff_t>(rank, 0, static_cast<std::ptrdiff_t>(sorted.size()) - 1);
  return sorted[static_cast<std::size_t>(rank)];
}

/// Lower median: element (n-1)/2 of the sorted list.
inline double lower_median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

}  // namespace fpcnet::stats

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "jumpsmp/errors.hpp"

namespace jumpsmp {

/// Dense (path x column) table of doubles. Columns are time indices and are stored
/// contiguously, so a whole cross-section over paths at one time is a single span.
class PathArray {
 public:
  PathArray() = default;
  PathArray(std::size_t n_paths, std::size_t n_cols, double fill = 0.0)
      : n_paths_(n_paths), n_cols_(n_cols), data_(n_paths * n_cols, fill) {}

  std::size_t n_paths() const noexcept { return n_paths_; }
  std::size_t n_cols() const noexcept { return n_cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t path, std::size_t col) { return data_[col * n_paths_ + path]; }
  double operator()(std::size_t path, std::size_t col) const {
    return data_[col * n_paths_ + path];
  }

  std::span<double> column(std::size_t col) {
    return {data_.data() + col * n_paths_, n_paths_};
  }
  std::span<const double> column(std::size_t col) const {
    return {data_.data() + col * n_paths_, n_paths_};
  }

  std::span<const double> raw() const noexcept { return data_; }
  std::span<double> raw() noexcept { return data_; }

  bool operator==(const PathArray&) const = default;

 private:
  std::size_t n_paths_ = 0;
  std::size_t n_cols_ = 0;
  std::vector<double> data_;
};

}  // namespace jumpsmp

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "jumpsmp/model.hpp"
#include "jumpsmp/path_array.hpp"

namespace jumpsmp {

struct JumpEvent {
  std::uint32_t step;
  std::uint32_t atom;
  std::uint32_t count;
};

/// Brownian increments and binned Poisson jump counts for an ensemble of paths.
struct NoiseBundle {
  TimeGrid grid;
  LevyMeasure levy;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;
  PathArray dB;                                // n_paths x N
  std::vector<std::vector<JumpEvent>> jumps;  // per path, sorted by (step, atom)

  /// Jump count of one atom on [t_step, t_step+1). Lists are short, so a scan suffices.
  std::uint32_t count(std::size_t path, std::size_t step, std::size_t atom) const {
    const auto& list = jumps[path];
    auto it = std::lower_bound(list.begin(), list.end(), step,
                               [](const JumpEvent& e, std::size_t s) { return e.step < s; });
    for (; it != list.end() && it->step == step; ++it) {
      if (it->atom == atom) return it->count;
    }
    return 0;
  }

  /// Compensated increment N~_k([t_i, t_i+1)) = count - intensity * dt.
  double compensated(std::size_t path, std::size_t step, std::size_t atom) const {
    return static_cast<double>(count(path, step, atom)) - levy[atom].intensity * grid.dt();
  }
};

using NoisePtr = std::shared_ptr<const NoiseBundle>;

/// Walks the sorted jump list of every path in step order. Used by the step-major loops.
class JumpCursor {
 public:
  explicit JumpCursor(const NoiseBundle& noise)
      : noise_(&noise), pos_(noise.n_paths, 0), counts_(noise.levy.size(), 0) {}

  /// Counts per atom of `path` on step `step`; steps must be visited in increasing order.
  std::span<const std::uint32_t> at(std::size_t path, std::size_t step) {
    std::fill(counts_.begin(), counts_.end(), 0u);
    const auto& list = noise_->jumps[path];
    auto& p = pos_[path];
    while (p < list.size() && list[p].step < step) ++p;
    for (std::size_t q = p; q < list.size() && list[q].step == step; ++q) {
      counts_[list[q].atom] = list[q].count;
    }
    return counts_;
  }

 private:
  const NoiseBundle* noise_;
  std::vector<std::size_t> pos_;
  std::vector<std::uint32_t> counts_;
};

namespace detail {

/// Independent engine per path; the stream depends only on (seed, path).
inline std::mt19937_64 path_engine(std::uint64_t seed, std::uint64_t path) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(path), static_cast<std::uint32_t>(path >> 32),
                    0x6a756d70u};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Deterministic in its arguments; path k of an n-path bundle equals path k of any
/// larger bundle with the same seed.
inline NoisePtr sample_noise(const TimeGrid& grid, const LevyMeasure& levy, std::size_t n_paths,
                             std::uint64_t seed) {
  if (n_paths < 1) throw InvalidArgument("need at least one path");
  auto bundle = std::make_shared<NoiseBundle>(NoiseBundle{grid, levy, n_paths, seed, {}, {}});
  const std::size_t n = grid.n_steps();
  const double sqrt_dt = std::sqrt(grid.dt());
  bundle->dB = PathArray(n_paths, n);
  bundle->jumps.resize(n_paths);

  for (std::size_t k = 0; k < n_paths; ++k) {
    auto engine = detail::path_engine(seed, k);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::poisson_distribution<std::uint32_t>> poisson;
    poisson.reserve(levy.size());
    for (const auto& a : levy.atoms()) {
      poisson.emplace_back(std::max(a.intensity * grid.dt(), 1e-300));
    }
    auto& events = bundle->jumps[k];
    for (std::size_t i = 0; i < n; ++i) {
      bundle->dB(k, i) = sqrt_dt * normal(engine);
      for (std::size_t a = 0; a < levy.size(); ++a) {
        if (levy[a].intensity == 0.0) continue;
        const auto c = poisson[a](engine);
        if (c > 0) {
          events.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(a), c});
        }
      }
    }
  }
  return bundle;
}

}  // namespace jumpsmp

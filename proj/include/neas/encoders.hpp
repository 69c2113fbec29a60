#pragma once

// Positional encoders: octave sin/cos features and a multiresolution hash
// grid. Both accept a schedule value tau that fades components in from
// coarse to fine; tau = kUnmasked disables the fade.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "neas/diffcore.hpp"

namespace neas {

inline constexpr double kUnmasked = std::numeric_limits<double>::infinity();

/// Weight of component k at schedule value tau: 0 before tau reaches k, a
/// half-cosine ramp over [k, k+1), then 1.
inline double freq_mask_weight(int k, double tau) {
  const double r = tau - static_cast<double>(k);
  if (r < 0.0) return 0.0;
  if (r < 1.0) return (1.0 - std::cos(r * std::numbers::pi)) / 2.0;
  return 1.0;
}

// ---------------------------------------------------------------------------
// Frequency encoding

struct FrequencyEncoderCfg {
  int octaves = 6;

  int output_dim() const { return 3 * 2 * octaves; }
};

/// Layout per coordinate c: [sin(2^0 π x_c), cos(2^0 π x_c), ..., sin(2^{L-1} π x_c), cos(...)],
/// coordinates concatenated x, y, z. Octave k is scaled by freq_mask_weight(k, tau).
inline std::vector<double> frequency_encode(const Eigen::Vector3d& x, const FrequencyEncoderCfg& cfg,
                                            double tau = kUnmasked) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(cfg.output_dim()));
  for (int c = 0; c < 3; ++c) {
    for (int k = 0; k < cfg.octaves; ++k) {
      const double w = freq_mask_weight(k, tau);
      const double a = std::ldexp(std::numbers::pi, k) * x[c];
      out.push_back(w * std::sin(a));
      out.push_back(w * std::cos(a));
    }
  }
  return out;
}

/// Batched form: x is [P×3], result is [P×3·2L].
inline Var frequency_encode(Graph& g, Var x, const FrequencyEncoderCfg& cfg, double tau = kUnmasked) {
  if (g.shape(x).cols != 3) throw ShapeError(concat("frequency_encode: expected [Px3] input, got ", g.shape(x).str()));
  const Matrix& xs = g.value(x);
  const Index n = xs.rows();
  const int width = cfg.output_dim();
  std::vector<double> weights(static_cast<std::size_t>(cfg.octaves));
  for (int k = 0; k < cfg.octaves; ++k) weights[static_cast<std::size_t>(k)] = freq_mask_weight(k, tau);

  Matrix out(n, width);
  for (Index i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      for (int k = 0; k < cfg.octaves; ++k) {
        const double a = std::ldexp(std::numbers::pi, k) * xs(i, c);
        const Index col = c * 2 * cfg.octaves + 2 * k;
        out(i, col) = weights[static_cast<std::size_t>(k)] * std::sin(a);
        out(i, col + 1) = weights[static_cast<std::size_t>(k)] * std::cos(a);
      }
    }
  }
  return g.custom("frequency_encode", {x}, std::move(out),
                  [x, weights, octaves = cfg.octaves](Graph& gr, const Matrix& go) {
                    if (!gr.needs_grad(x)) return;
                    const Matrix& xv = gr.value(x);
                    Matrix dx = Matrix::Zero(xv.rows(), 3);
                    for (Index i = 0; i < xv.rows(); ++i) {
                      for (int c = 0; c < 3; ++c) {
                        double acc = 0.0;
                        for (int k = 0; k < octaves; ++k) {
                          const double freq = std::ldexp(std::numbers::pi, k);
                          const double a = freq * xv(i, c);
                          const Index col = c * 2 * octaves + 2 * k;
                          const double w = weights[static_cast<std::size_t>(k)] * freq;
                          acc += go(i, col) * w * std::cos(a) - go(i, col + 1) * w * std::sin(a);
                        }
                        dx(i, c) = acc;
                      }
                    }
                    gr.accumulate(x, dx);
                  });
}

// ---------------------------------------------------------------------------
// Multiresolution hash grid

struct HashGridConfig {
  int levels = 14;
  int base_resolution = 16;
  int max_resolution = 2048;
  int features_per_level = 2;
  std::uint32_t table_size = 1u << 19;
  double init_range = 1e-4;
};

inline constexpr std::array<std::uint32_t, 3> kHashPrimes{1u, 2654435761u, 805459861u};

/// Vertices per axis at every level, growing geometrically from base to max.
inline std::vector<int> hash_level_resolutions(const HashGridConfig& cfg) {
  std::vector<int> res(static_cast<std::size_t>(cfg.levels));
  const double growth = cfg.levels > 1 ? std::exp((std::log(static_cast<double>(cfg.max_resolution)) -
                                                   std::log(static_cast<double>(cfg.base_resolution))) /
                                                  static_cast<double>(cfg.levels - 1))
                                       : 1.0;
  for (int l = 0; l < cfg.levels; ++l) {
    res[static_cast<std::size_t>(l)] =
        static_cast<int>(std::lround(static_cast<double>(cfg.base_resolution) * std::pow(growth, l)));
  }
  return res;
}

class HashGrid {
 public:
  HashGrid() = default;
  HashGrid(HashGridConfig cfg, std::uint64_t seed) : cfg_(cfg), resolutions_(hash_level_resolutions(cfg)) {
    if (cfg.levels < 1 || cfg.features_per_level < 1 || cfg.table_size < 1 || cfg.base_resolution < 2 ||
        cfg.max_resolution < cfg.base_resolution) {
      throw std::invalid_argument("HashGrid: invalid configuration");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> init(-cfg.init_range, cfg.init_range);
    Matrix table(static_cast<Index>(cfg.levels) * cfg.table_size, cfg.features_per_level);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = init(rng);
    table_ = ParamTensor("hash_table", std::move(table));
  }

  const HashGridConfig& config() const { return cfg_; }
  int levels() const { return cfg_.levels; }
  int features() const { return cfg_.features_per_level; }
  int output_dim() const { return cfg_.levels * cfg_.features_per_level; }
  int resolution(int level) const { return resolutions_.at(static_cast<std::size_t>(level)); }
  const std::vector<int>& resolutions() const { return resolutions_; }

  /// True when every vertex of the level has its own slot.
  bool is_dense(int level) const {
    const auto r = static_cast<std::uint64_t>(resolution(level));
    return r * r * r <= cfg_.table_size;
  }

  /// Slot of an integer vertex inside the level's table (not offset by level).
  std::uint32_t hash_index(const std::array<std::uint32_t, 3>& v, int level) const {
    if (is_dense(level)) {
      const auto r = static_cast<std::uint64_t>(resolution(level));
      return static_cast<std::uint32_t>(v[0] + r * (v[1] + r * v[2]));
    }
    const std::uint32_t h = (v[0] * kHashPrimes[0]) ^ (v[1] * kHashPrimes[1]) ^ (v[2] * kHashPrimes[2]);
    return h % cfg_.table_size;
  }

  ParamTensor& table() { return table_; }
  const ParamTensor& table() const { return table_; }

  /// Row of `table()` holding a level's slot.
  Index row(int level, std::uint32_t slot) const {
    return static_cast<Index>(level) * static_cast<Index>(cfg_.table_size) + static_cast<Index>(slot);
  }

 private:
  HashGridConfig cfg_;
  std::vector<int> resolutions_;
  ParamTensor table_;
};

namespace detail {

/// Corner slots and trilinear weights of one point on one level.
struct CellLookup {
  std::array<Index, 8> rows{};
  std::array<double, 8> weights{};
  std::array<double, 3> frac{};
  double scale = 0.0;  // d(grid coordinate)/dx
  std::array<bool, 3> clamped{};
};

inline CellLookup lookup_cell(const HashGrid& grid, int level, const std::array<double, 3>& x) {
  CellLookup cell;
  const int res = grid.resolution(level);
  cell.scale = 0.5 * static_cast<double>(res - 1);
  std::array<std::uint32_t, 3> base{};
  for (int c = 0; c < 3; ++c) {
    double xc = x[static_cast<std::size_t>(c)];
    if (xc < -1.0 || xc > 1.0) {
      cell.clamped[static_cast<std::size_t>(c)] = true;
      xc = std::clamp(xc, -1.0, 1.0);
    }
    const double pos = (xc + 1.0) * cell.scale;
    auto b = static_cast<int>(std::floor(pos));
    b = std::clamp(b, 0, res - 2);
    base[static_cast<std::size_t>(c)] = static_cast<std::uint32_t>(b);
    cell.frac[static_cast<std::size_t>(c)] = pos - static_cast<double>(b);
  }
  for (int corner = 0; corner < 8; ++corner) {
    std::array<std::uint32_t, 3> v{};
    double w = 1.0;
    for (int c = 0; c < 3; ++c) {
      const bool hi = ((corner >> c) & 1) != 0;
      v[static_cast<std::size_t>(c)] = base[static_cast<std::size_t>(c)] + (hi ? 1u : 0u);
      const double f = cell.frac[static_cast<std::size_t>(c)];
      w *= hi ? f : (1.0 - f);
    }
    cell.rows[static_cast<std::size_t>(corner)] = grid.row(level, grid.hash_index(v, level));
    cell.weights[static_cast<std::size_t>(corner)] = w;
  }
  return cell;
}

inline std::vector<double> level_weights(int levels, double tau) {
  std::vector<double> w(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) w[static_cast<std::size_t>(l)] = freq_mask_weight(l, tau);
  return w;
}

}  // namespace detail

/// Features of one point: per level, trilinear blend of the 8 corner entries,
/// scaled by freq_mask_weight(level, tau). Points outside [-1,1]^3 are clamped.
inline constexpr double kWarnEdge = 1.001 * 1.001;

inline std::vector<double> hash_encode(const HashGrid& grid, const Eigen::Vector3d& x, double tau = kUnmasked) {
  const int F = grid.features();
  const auto weights = detail::level_weights(grid.levels(), tau);
  std::vector<double> out(static_cast<std::size_t>(grid.output_dim()), 0.0);
  const Matrix& table = grid.table().value();
  for (int l = 0; l < grid.levels(); ++l) {
    const auto cell = detail::lookup_cell(grid, l, {x[0], x[1], x[2]});
    for (int corner = 0; corner < 8; ++corner) {
      const double w = cell.weights[static_cast<std::size_t>(corner)] * weights[static_cast<std::size_t>(l)];
      for (int f = 0; f < F; ++f) {
        out[static_cast<std::size_t>(l * F + f)] += w * table(cell.rows[static_cast<std::size_t>(corner)], f);
      }
    }
  }
  return out;
}

/// Batched form: x is [P×3], result is [P×levels·F]. Differentiable w.r.t. the
/// table (scatter-add) and w.r.t. x (derivative of the trilinear weights).
inline Var hash_encode(Graph& g, Var x, HashGrid& grid, double tau = kUnmasked) {
  if (g.shape(x).cols != 3) throw ShapeError(concat("hash_encode: expected [Px3] input, got ", g.shape(x).str()));
  const Var table = g.param(grid.table());
  const Matrix& xs = g.value(x);
  const Matrix& tv = grid.table().value();
  const int F = grid.features();
  const int L = grid.levels();
  const auto weights = detail::level_weights(L, tau);

  Matrix out = Matrix::Zero(xs.rows(), static_cast<Index>(L) * F);
  std::size_t clamped = 0;
  for (Index i = 0; i < xs.rows(); ++i) {
    const std::array<double, 3> p{xs(i, 0), xs(i, 1), xs(i, 2)};
    for (int l = 0; l < L; ++l) {
      const double wl = weights[static_cast<std::size_t>(l)];
      if (wl == 0.0) continue;
      const auto cell = detail::lookup_cell(grid, l, p);
      // Finite-difference probes legitimately step a hair outside the cube.
      if (l == 0 && (p[0] * p[0] > kWarnEdge || p[1] * p[1] > kWarnEdge || p[2] * p[2] > kWarnEdge)) ++clamped;
      for (int corner = 0; corner < 8; ++corner) {
        const double w = wl * cell.weights[static_cast<std::size_t>(corner)];
        const Index r = cell.rows[static_cast<std::size_t>(corner)];
        for (int f = 0; f < F; ++f) out(i, l * F + f) += w * tv(r, f);
      }
    }
  }
  if (clamped > 0) log(LogLevel::warn, concat("hash_encode: clamped ", clamped, " point(s) outside [-1,1]^3"));

  const HashGrid* gridp = &grid;
  return g.custom("hash_encode", {x, table}, std::move(out), [x, table, gridp, weights](Graph& gr, const Matrix& go) {
    const HashGrid& hg = *gridp;
    const int Fd = hg.features();
    const Matrix& xv = gr.value(x);
    const Matrix& tvals = gr.value(table);
    const bool want_table = gr.needs_grad(table);
    const bool want_x = gr.needs_grad(x);
    Matrix* tgrad = want_table ? &gr.grad_buffer(table) : nullptr;
    Matrix dx = want_x ? Matrix::Zero(xv.rows(), 3) : Matrix();
    for (Index i = 0; i < xv.rows(); ++i) {
      const std::array<double, 3> p{xv(i, 0), xv(i, 1), xv(i, 2)};
      for (int l = 0; l < hg.levels(); ++l) {
        const double wl = weights[static_cast<std::size_t>(l)];
        if (wl == 0.0) continue;
        const auto cell = detail::lookup_cell(hg, l, p);
        for (int corner = 0; corner < 8; ++corner) {
          const Index r = cell.rows[static_cast<std::size_t>(corner)];
          if (want_table) {
            const double w = wl * cell.weights[static_cast<std::size_t>(corner)];
            for (int f = 0; f < Fd; ++f) (*tgrad)(r, f) += w * go(i, l * Fd + f);
          }
          if (want_x) {
            // Readout of the upstream gradient against this corner's features.
            double dot = 0.0;
            for (int f = 0; f < Fd; ++f) dot += go(i, l * Fd + f) * tvals(r, f);
            for (int c = 0; c < 3; ++c) {
              if (cell.clamped[static_cast<std::size_t>(c)]) continue;
              double dw = 1.0;
              for (int a = 0; a < 3; ++a) {
                const bool hi = ((corner >> a) & 1) != 0;
                const double f = cell.frac[static_cast<std::size_t>(a)];
                if (a == c) {
                  dw *= hi ? 1.0 : -1.0;
                } else {
                  dw *= hi ? f : (1.0 - f);
                }
              }
              dx(i, c) += wl * dot * dw * cell.scale;
            }
          }
        }
      }
    }
    if (want_x) gr.accumulate(x, dx);
  });
}

}  // namespace neas

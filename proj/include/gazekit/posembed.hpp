#pragma once

#include <cmath>

#include "gazekit/common.hpp"

namespace gazekit {

// Absolute 2D sinusoidal position embedding, laid out as one row per grid
// cell in row-major order. Channels are split into four blocks of d/4:
// [sin(x w), cos(x w), sin(y w), cos(y w)] with the usual 10000^(k/(d/4))
// frequency ladder over cell indices.
template <class S>
Mat<S> sinusoidal_embedding(Index d_model, Index H, Index W) {
  if (d_model <= 0 || d_model % 4 != 0)
    throw ConfigError("sinusoidal embedding needs d_model divisible by 4, got " +
                      std::to_string(d_model));
  if (H < 1 || W < 1) throw ConfigError("sinusoidal embedding: empty grid");
  const Index q = d_model / 4;
  std::vector<double> omega(q);
  for (Index k = 0; k < q; ++k)
    omega[k] = 1.0 / std::pow(10000.0, static_cast<double>(k) / q);
  Mat<S> P(H * W, d_model);
  for (Index i = 0; i < H; ++i) {
    for (Index j = 0; j < W; ++j) {
      Index row = i * W + j;
      for (Index k = 0; k < q; ++k) {
        double ax = j * omega[k];
        double ay = i * omega[k];
        P(row, k) = static_cast<S>(std::sin(ax));
        P(row, q + k) = static_cast<S>(std::cos(ax));
        P(row, 2 * q + k) = static_cast<S>(std::sin(ay));
        P(row, 3 * q + k) = static_cast<S>(std::cos(ay));
      }
    }
  }
  return P;
}

}  // namespace gazekit

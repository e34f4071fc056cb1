#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kic/backbone.hpp"
#include "kic/training.hpp"

namespace kic {

// V=11, d_model=8, 2 heads, one encoder and one decoder layer.
T2TConfig tiny_check_config(std::uint64_t seed = 3);

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  double alpha = 0.05;
  std::uint64_t seed = 3;
  int batch_size = 3;
  SelectorMode mode = SelectorMode::instance;
  bool detach_scale = false;
  // Selector weights are drawn with this standard deviation so that the
  // routing is not near-uniform (0 keeps the regular initialization).
  double selector_init_sd = 0.5;
};

struct BlockCheck {
  std::string name;
  std::size_t entries = 0;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  double fd_norm = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  double scale_rel_error = 0.0;  // dCE/dscale of one backbone pass
  std::vector<int> experts;      // routing of the checked batch
  bool passed = false;
  double seconds = 0.0;
};

// ||a - b|| / max(||a||, ||b||), 0 when both are below 1e-12.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

// Central differences of the total batch objective against the analytic
// gradient from batch_gradients, block by block, in 64-bit precision.
// Routing choices and dispatch fractions are held at their unperturbed
// values, which is exact away from argmax ties.
GradCheckReport run_gradient_check(const GradCheckOptions& options = {});

}  // namespace kic

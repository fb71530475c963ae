// layers.hpp — named parameter registry and reusable layer blocks.
//
// Parameters are created once per model through a ParamStore (which owns the
// canonical ordering used for flattening and checkpoints) and applied every
// forward pass via the small callable structs below.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "regseg/ops.hpp"
#include "regseg/prng.hpp"
#include "regseg/tensor.hpp"

namespace regseg::nn {

class ParamStore {
 public:
  NodePtr add(const std::string& name, std::vector<int> shape, Arr init);
  const NodePtr& get(const std::string& name) const;  // throws when absent
  const std::vector<std::pair<std::string, NodePtr>>& items() const {
    return items_;
  }
  std::vector<NodePtr> params() const;
  std::size_t scalar_count() const;

  /// Concatenation of all parameter values in registration order.
  Arr flatten() const;
  void load_flat(const Arr& flat);

 private:
  std::vector<std::pair<std::string, NodePtr>> items_;
};

/// Zero-mean normal draws scaled for the given fan-in.
Arr he_init(std::size_t n, int fan_in, Rng& rng);

struct Conv2d {
  NodePtr w, b;
  int kh = 3, kw = 3, stride = 1, pad = 1;
  NodePtr operator()(const NodePtr& x) const {
    return conv2d(x, w, b, kh, kw, stride, pad);
  }
};
Conv2d make_conv(ParamStore& ps, const std::string& name, int cin, int cout,
                 int k, int stride, int pad, Rng& rng);

/// y = x·wᵀ + b with w shaped (out, in).
struct Linear {
  NodePtr w, b;
  NodePtr operator()(const NodePtr& x) const {
    return add_bias_cols(matmul_nt(x, w), b);
  }
};
Linear make_linear(ParamStore& ps, const std::string& name, int in, int out,
                   Rng& rng);

/// Per-location normalization over channels with learned gain and shift.
struct ChannelNorm {
  NodePtr gain, bias;
  NodePtr operator()(const NodePtr& x) const {
    return add_bias_channels(scale_channels(layer_norm_channels(x), gain),
                             bias);
  }
};
ChannelNorm make_channel_norm(ParamStore& ps, const std::string& name, int c);

/// Per-row (token) normalization with learned gain and shift.
struct RowNorm {
  NodePtr gain, bias;
  NodePtr operator()(const NodePtr& x) const {
    return add_bias_cols(scale_cols(layer_norm_rows(x), gain), bias);
  }
};
RowNorm make_row_norm(ParamStore& ps, const std::string& name, int d);

}  // namespace regseg::nn

// segnets.hpp — the two small segmentation networks: a convolutional
// encoder-decoder and a patch-token mixing network. Both expose per-pixel
// class logits plus an L2-normalized projected feature map at a fixed
// fraction of the input resolution.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "regseg/layers.hpp"
#include "regseg/tensor.hpp"
#include "regseg/volume.hpp"

namespace regseg {

struct ModelSpec {
  enum class Arch { convnet, mixer };
  Arch arch = Arch::convnet;
  int in_height = 32;
  int in_width = 32;
  int num_classes = 4;
  int feature_stride = 4;
  std::vector<int> channels{10, 20, 40};  // convnet stage widths
  int token_dim = 48;                     // mixer embedding width
  int mixer_blocks = 2;
  int patch = 4;  // mixer patch edge; equals feature_stride
  int proj_hidden = 256;
  int proj_dim = 128;

  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);
};

struct ForwardOutput {
  nn::NodePtr logits;    // (B, C, H, W)
  nn::NodePtr prob;      // softmax over C, same shape
  nn::NodePtr features;  // (B, proj_dim, H/stride, W/stride), unit-norm
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);

  /// x is (B, 1, H, W) matching the spec's input size.
  ForwardOutput forward(const nn::NodePtr& x) const;

  const ModelSpec& spec() const { return spec_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::size_t param_count() const { return params_.scalar_count(); }

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  void build(std::uint64_t seed);

  ModelSpec spec_;
  nn::ParamStore params_;

  // convnet pieces
  nn::Conv2d e0a_, e0b_, e1a_, e1b_, e2a_, e2b_, d2_, r1_, d1_, r0_, d0_,
      head_, proj1_, proj2_;
  nn::ChannelNorm n0a_, n0b_, n1a_, n1b_, n2a_, n2b_, nd2_, nr1_, nd1_, nr0_,
      nd0_;

  // mixer pieces
  nn::Linear embed_, mix_head_, mproj1_, mproj2_;
  struct MixerBlock {
    nn::RowNorm norm_tokens;
    nn::NodePtr token_w;  // (T, T)
    nn::RowNorm norm_channels;
    nn::Linear expand, contract;
  };
  std::vector<MixerBlock> blocks_;
  nn::RowNorm final_norm_;
};

/// Seeded pair with independent draws; complains (stderr) when both specs
/// request the same architecture but still builds them.
std::pair<Model, Model> init_models(const ModelSpec& a, const ModelSpec& b,
                                    std::uint64_t seed);

/// Stack of equally sized slices to a (B, 1, H, W) constant node.
nn::NodePtr make_input(const std::vector<Array2<double>>& slices);

}  // namespace regseg

// segnets.cpp — model construction, forward passes, checkpoint io.
#include "regseg/segnets.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "regseg/ops.hpp"
#include "regseg/prng.hpp"

namespace regseg {

using nn::NodePtr;

namespace {

constexpr char kCkptMagic[8] = {'R', 'S', 'E', 'G', 'N', 'E', 'T', '1'};

std::string arch_name(ModelSpec::Arch a) {
  return a == ModelSpec::Arch::convnet ? "convnet" : "mixer";
}

ModelSpec::Arch arch_from_name(const std::string& s) {
  if (s == "convnet") return ModelSpec::Arch::convnet;
  if (s == "mixer") return ModelSpec::Arch::mixer;
  throw std::invalid_argument("ModelSpec: unknown arch '" + s + "'");
}

void validate_spec(const ModelSpec& s) {
  if (s.in_height <= 0 || s.in_width <= 0)
    throw std::invalid_argument("ModelSpec: input size must be positive");
  if (s.num_classes < 2)
    throw std::invalid_argument("ModelSpec: need at least two classes");
  if (s.feature_stride != 4)
    throw std::invalid_argument("ModelSpec: feature stride is fixed at 4");
  if (s.in_height % 4 != 0 || s.in_width % 4 != 0)
    throw std::invalid_argument(
        "ModelSpec: input size must be divisible by 4");
  if (s.arch == ModelSpec::Arch::convnet && s.channels.size() != 3)
    throw std::invalid_argument("ModelSpec: convnet wants three stage widths");
  if (s.arch == ModelSpec::Arch::mixer && s.patch != s.feature_stride)
    throw std::invalid_argument("ModelSpec: mixer patch must equal stride");
  if (s.proj_hidden <= 0 || s.proj_dim <= 0)
    throw std::invalid_argument("ModelSpec: projector sizes must be positive");
}

}  // namespace

std::string ModelSpec::to_json() const {
  nlohmann::json j;
  j["arch"] = arch_name(arch);
  j["in_height"] = in_height;
  j["in_width"] = in_width;
  j["num_classes"] = num_classes;
  j["feature_stride"] = feature_stride;
  j["channels"] = channels;
  j["token_dim"] = token_dim;
  j["mixer_blocks"] = mixer_blocks;
  j["patch"] = patch;
  j["proj_hidden"] = proj_hidden;
  j["proj_dim"] = proj_dim;
  return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelSpec s;
  s.arch = arch_from_name(j.at("arch").get<std::string>());
  s.in_height = j.at("in_height").get<int>();
  s.in_width = j.at("in_width").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.feature_stride = j.at("feature_stride").get<int>();
  s.channels = j.at("channels").get<std::vector<int>>();
  s.token_dim = j.at("token_dim").get<int>();
  s.mixer_blocks = j.at("mixer_blocks").get<int>();
  s.patch = j.at("patch").get<int>();
  s.proj_hidden = j.at("proj_hidden").get<int>();
  s.proj_dim = j.at("proj_dim").get<int>();
  validate_spec(s);
  return s;
}

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  validate_spec(spec_);
  build(seed);
}

void Model::build(std::uint64_t seed) {
  Rng rng(seed);
  const int classes = spec_.num_classes;
  if (spec_.arch == ModelSpec::Arch::convnet) {
    const int c0 = spec_.channels[0], c1 = spec_.channels[1],
              c2 = spec_.channels[2];
    auto& ps = params_;
    e0a_ = nn::make_conv(ps, "e0a", 1, c0, 3, 1, 1, rng);
    n0a_ = nn::make_channel_norm(ps, "n0a", c0);
    e0b_ = nn::make_conv(ps, "e0b", c0, c0, 3, 1, 1, rng);
    n0b_ = nn::make_channel_norm(ps, "n0b", c0);
    e1a_ = nn::make_conv(ps, "e1a", c0, c1, 3, 2, 1, rng);
    n1a_ = nn::make_channel_norm(ps, "n1a", c1);
    e1b_ = nn::make_conv(ps, "e1b", c1, c1, 3, 1, 1, rng);
    n1b_ = nn::make_channel_norm(ps, "n1b", c1);
    e2a_ = nn::make_conv(ps, "e2a", c1, c2, 3, 2, 1, rng);
    n2a_ = nn::make_channel_norm(ps, "n2a", c2);
    e2b_ = nn::make_conv(ps, "e2b", c2, c2, 3, 1, 1, rng);
    n2b_ = nn::make_channel_norm(ps, "n2b", c2);
    d2_ = nn::make_conv(ps, "d2", c2, c2, 3, 1, 1, rng);
    nd2_ = nn::make_channel_norm(ps, "nd2", c2);
    r1_ = nn::make_conv(ps, "r1", c2 + c1, c1, 1, 1, 0, rng);
    nr1_ = nn::make_channel_norm(ps, "nr1", c1);
    d1_ = nn::make_conv(ps, "d1", c1, c1, 3, 1, 1, rng);
    nd1_ = nn::make_channel_norm(ps, "nd1", c1);
    r0_ = nn::make_conv(ps, "r0", c1 + c0, c0, 1, 1, 0, rng);
    nr0_ = nn::make_channel_norm(ps, "nr0", c0);
    d0_ = nn::make_conv(ps, "d0", c0, c0, 3, 1, 1, rng);
    nd0_ = nn::make_channel_norm(ps, "nd0", c0);
    head_ = nn::make_conv(ps, "head", c0, classes, 1, 1, 0, rng);
    proj1_ = nn::make_conv(ps, "proj1", c2, spec_.proj_hidden, 1, 1, 0, rng);
    proj2_ = nn::make_conv(ps, "proj2", spec_.proj_hidden, spec_.proj_dim, 1,
                           1, 0, rng);
    return;
  }

  const int p = spec_.patch;
  const int gh = spec_.in_height / p, gw = spec_.in_width / p;
  const int tokens = gh * gw;
  const int dim = spec_.token_dim;
  auto& ps = params_;
  embed_ = nn::make_linear(ps, "embed", p * p, dim, rng);
  blocks_.clear();
  for (int b = 0; b < spec_.mixer_blocks; ++b) {
    MixerBlock blk;
    const std::string tag = "block" + std::to_string(b);
    blk.norm_tokens = nn::make_row_norm(ps, tag + ".norm_t", dim);
    blk.token_w = ps.add(tag + ".token_w", {tokens, tokens},
                         nn::he_init(static_cast<std::size_t>(tokens) * tokens,
                                     tokens, rng));
    blk.norm_channels = nn::make_row_norm(ps, tag + ".norm_c", dim);
    blk.expand = nn::make_linear(ps, tag + ".expand", dim, 2 * dim, rng);
    blk.contract = nn::make_linear(ps, tag + ".contract", 2 * dim, dim, rng);
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = nn::make_row_norm(ps, "final_norm", dim);
  mix_head_ = nn::make_linear(ps, "head", dim, classes * p * p, rng);
  mproj1_ = nn::make_linear(ps, "proj1", dim, spec_.proj_hidden, rng);
  mproj2_ = nn::make_linear(ps, "proj2", spec_.proj_hidden, spec_.proj_dim,
                            rng);
}

ForwardOutput Model::forward(const NodePtr& x) const {
  if (!x || x->shape.size() != 4 || x->shape[1] != 1 ||
      x->shape[2] != spec_.in_height || x->shape[3] != spec_.in_width)
    throw std::invalid_argument(
        "Model::forward: input must be (B, 1, H, W) at the configured size");
  const int batch = x->shape[0];

  ForwardOutput out;
  if (spec_.arch == ModelSpec::Arch::convnet) {
    auto a0 = nn::gelu(n0a_(e0a_(x)));
    auto s0 = nn::gelu(n0b_(e0b_(a0)));
    auto a1 = nn::gelu(n1a_(e1a_(s0)));
    auto s1 = nn::gelu(n1b_(e1b_(a1)));
    auto a2 = nn::gelu(n2a_(e2a_(s1)));
    auto b2 = nn::gelu(n2b_(e2b_(a2)));
    auto deep = nn::gelu(nd2_(d2_(b2)));  // coarsest decoder map, stride 4
    auto u1 = nn::concat_channels(nn::upsample_nearest2(deep), s1);
    auto m1 = nn::gelu(nr1_(r1_(u1)));
    auto v1 = nn::gelu(nd1_(d1_(m1)));
    auto u0 = nn::concat_channels(nn::upsample_nearest2(v1), s0);
    auto m0 = nn::gelu(nr0_(r0_(u0)));
    auto v0 = nn::gelu(nd0_(d0_(m0)));
    out.logits = head_(v0);
    out.features = nn::l2_normalize_channels(proj2_(nn::gelu(proj1_(deep))));
  } else {
    const int p = spec_.patch;
    const int gh = spec_.in_height / p, gw = spec_.in_width / p;
    auto tok = embed_(nn::extract_patches(x, p));  // (B·T, D)
    for (const auto& blk : blocks_) {
      auto mixed = nn::apply_token_matrix(blk.norm_tokens(tok), blk.token_w,
                                          batch);
      tok = nn::add(tok, mixed);
      auto widened = blk.contract(nn::gelu(blk.expand(blk.norm_channels(tok))));
      tok = nn::add(tok, widened);
    }
    tok = final_norm_(tok);
    out.logits = nn::patches_to_image(mix_head_(tok), batch, spec_.num_classes,
                                      spec_.in_height, spec_.in_width, p);
    auto pf = nn::l2_normalize_rows(mproj2_(nn::gelu(mproj1_(tok))));
    out.features = nn::patches_to_image(pf, batch, spec_.proj_dim, gh, gw, 1);
  }
  out.prob = nn::softmax_channels(out.logits);
  return out;
}

void Model::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("Model::save: cannot open " + path);
  f.write(kCkptMagic, sizeof(kCkptMagic));
  const std::string spec_json = spec_.to_json();
  const std::uint64_t json_len = spec_json.size();
  f.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
  f.write(spec_json.data(), static_cast<std::streamsize>(json_len));
  const nn::Arr flat = params_.flatten();
  const std::uint64_t n = static_cast<std::uint64_t>(flat.size());
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  f.write(reinterpret_cast<const char*>(flat.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!f) throw std::runtime_error("Model::save: write failed for " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("Model::load: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error("Model::load: bad header in " + path);
  std::uint64_t json_len = 0;
  f.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
  std::string spec_json(json_len, '\0');
  f.read(spec_json.data(), static_cast<std::streamsize>(json_len));
  std::uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  nn::Arr flat(static_cast<Eigen::Index>(n));
  f.read(reinterpret_cast<char*>(flat.data()),
         static_cast<std::streamsize>(n * sizeof(double)));
  if (!f) throw std::runtime_error("Model::load: truncated file " + path);
  Model m(ModelSpec::from_json(spec_json), 0);
  if (m.param_count() != n)
    throw std::runtime_error("Model::load: parameter count mismatch in " +
                             path);
  m.params_.load_flat(flat);
  return m;
}

std::pair<Model, Model> init_models(const ModelSpec& a, const ModelSpec& b,
                                    std::uint64_t seed) {
  if (a.arch == b.arch)
    std::fprintf(stderr,
                 "init_models: both networks use the %s architecture; cross "
                 "supervision works best with distinct designs\n",
                 arch_name(a.arch).c_str());
  Rng root(seed);
  return {Model(a, root.child("model_a").seed()),
          Model(b, root.child("model_b").seed())};
}

NodePtr make_input(const std::vector<Array2<double>>& slices) {
  if (slices.empty())
    throw std::invalid_argument("make_input: empty batch");
  const int h = slices[0].height(), w = slices[0].width();
  const int batch = static_cast<int>(slices.size());
  nn::Arr v(static_cast<Eigen::Index>(batch) * h * w);
  for (int s = 0; s < batch; ++s) {
    if (slices[s].height() != h || slices[s].width() != w)
      throw std::invalid_argument("make_input: mixed slice sizes");
    for (std::size_t i = 0; i < slices[s].size(); ++i)
      v(static_cast<Eigen::Index>(s) * h * w + static_cast<Eigen::Index>(i)) =
          slices[s][i];
  }
  return nn::make_leaf({batch, 1, h, w}, std::move(v), false);
}

}  // namespace regseg

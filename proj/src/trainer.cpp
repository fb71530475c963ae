// trainer.cpp — see trainer.hpp.
#include "regseg/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "regseg/ops.hpp"

namespace regseg {

using nn::NodePtr;

double w_cps_schedule(int i, int t_total) {
  if (t_total <= 0) throw std::invalid_argument("w_cps_schedule: t_total <= 0");
  if (i < 0 || i > t_total)
    throw std::invalid_argument("w_cps_schedule: iteration outside budget");
  const double r = 1.0 - static_cast<double>(i) / t_total;
  return 0.1 * std::exp(-5.0 * r * r);
}

// ---- dihedral augmentation ------------------------------------------------

std::pair<double, double> dihedral_source(int d, double y, double x, int n) {
  const double e = n - 1.0;
  switch (d) {
    case 0: return {y, x};
    case 1: return {x, e - y};          // 90° rotation
    case 2: return {e - y, e - x};      // 180°
    case 3: return {e - x, y};          // 270°
    case 4: return {y, e - x};          // mirror across the vertical axis
    case 5: return {x, y};              // transpose
    case 6: return {e - y, x};          // mirror across the horizontal axis
    case 7: return {e - x, e - y};      // anti-transpose
    default:
      throw std::invalid_argument("dihedral_source: index must be in [0,8)");
  }
}

int dihedral_inverse(int d) {
  static constexpr int inv[8] = {0, 3, 2, 1, 4, 5, 6, 7};
  if (d < 0 || d >= 8)
    throw std::invalid_argument("dihedral_inverse: index must be in [0,8)");
  return inv[d];
}

template <class T>
Array2<T> dihedral_apply(const Array2<T>& a, int d) {
  if (a.height() != a.width())
    throw std::invalid_argument("dihedral_apply: plane must be square");
  const int n = a.height();
  Array2<T> out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto [sy, sx] = dihedral_source(d, y, x, n);
      out.at(y, x) = a.at(static_cast<int>(sy), static_cast<int>(sx));
    }
  return out;
}
template Array2<double> dihedral_apply(const Array2<double>&, int);
template Array2<std::int32_t> dihedral_apply(const Array2<std::int32_t>&, int);

FeatureMap dihedral_restore(const FeatureMap& m, int d) {
  if (m.height != m.width)
    throw std::invalid_argument("dihedral_restore: map must be square");
  const int n = m.height, inv = dihedral_inverse(d);
  FeatureMap out(m.channels, n, n);
  for (int c = 0; c < m.channels; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const auto [sy, sx] = dihedral_source(inv, y, x, n);
        out.at(c, y, x) =
            m.at(c, static_cast<int>(sy), static_cast<int>(sx));
      }
  return out;
}

// ---- configuration --------------------------------------------------------

void TrainConfig::validate() const {
  if (t_total < 1) throw std::invalid_argument("TrainConfig: t_total < 1");
  if (batch < 2 || batch % 2 != 0)
    throw std::invalid_argument("TrainConfig: batch must be even and >= 2");
  if (lr_a <= 0 || lr_b <= 0)
    throw std::invalid_argument("TrainConfig: learning rates must be > 0");
  if (weight_decay < 0 || w_cl < 0 || w_rs < 0)
    throw std::invalid_argument("TrainConfig: weights must be >= 0");
  if (flags.reps && !flags.scl)
    throw std::invalid_argument(
        "TrainConfig: registration-enhanced positives require the "
        "contrastive term (reps => scl)");
  if (contrast.temperature <= 0)
    throw std::invalid_argument("TrainConfig: temperature must be > 0");
  if (feature_stride != 4)
    throw std::invalid_argument("TrainConfig: feature stride is fixed at 4");
}

// ---- batches --------------------------------------------------------------

namespace {

std::vector<SliceRef> pool_slices(const Dataset& train,
                                  const std::vector<int>& volumes) {
  std::vector<SliceRef> out;
  for (const int v : volumes) {
    const int depth = train.volumes[static_cast<std::size_t>(v)].dims()[0];
    for (int z = 0; z < depth; ++z) out.push_back({v, z});
  }
  return out;
}

}  // namespace

Batch compose_batch(const Dataset& train, int batch_size, bool augment,
                    Rng& rng) {
  if (batch_size < 2 || batch_size % 2 != 0)
    throw std::invalid_argument("compose_batch: batch must be even and >= 2");
  const auto labeled = pool_slices(train, train.labeled);
  const auto unlabeled = pool_slices(train, train.unlabeled);
  if (labeled.empty() || unlabeled.empty())
    throw std::invalid_argument(
        "compose_batch: need both labeled and unlabeled slices");
  Batch batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  const int half = batch_size / 2;
  for (int i = 0; i < batch_size; ++i) {
    const bool lab = i < half;
    const auto& pool = lab ? labeled : unlabeled;
    BatchItem item;
    item.ref = pool[rng.uniform_int(pool.size())];
    item.labeled = lab;
    item.dihedral = augment ? static_cast<int>(rng.uniform_int(8)) : 0;
    batch.push_back(item);
  }
  return batch;
}

// ---- trainer --------------------------------------------------------------

namespace {

nn::OptimConfig optim_config(double lr, const TrainConfig& cfg) {
  nn::OptimConfig oc;
  oc.lr = lr;
  oc.weight_decay = cfg.weight_decay;
  oc.t_total = cfg.t_total;
  return oc;
}

int dataset_slice_count(const Dataset& train) {
  int total = 0;
  for (const auto& v : train.volumes) total += v.dims()[0];
  return total;
}

/// Per-slice feature map (float copy) of one batch sample.
FeatureMap feature_map_of(const NodePtr& features, int b) {
  const int c = features->shape[1], gh = features->shape[2],
            gw = features->shape[3];
  FeatureMap map(c, gh, gw);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x)
        map.at(k, y, x) = static_cast<float>(features->value(
            ((static_cast<long>(b) * c + k) * gh + y) * gw + x));
  return map;
}

double scalar(const NodePtr& n) { return n ? n->value(0) : 0.0; }

}  // namespace

Trainer::Trainer(const Dataset& train, TrainConfig cfg,
                 const ModelSpec& spec_a, const ModelSpec& spec_b,
                 const TransformTable* table, const RegisteredLabels* rsl)
    : train_(&train), cfg_(cfg), table_(table), rsl_(rsl) {
  cfg_.validate();
  if (train.labeled.empty() || train.unlabeled.empty())
    throw std::invalid_argument(
        "Trainer: cohort needs labeled and unlabeled volumes");
  if (cfg_.flags.rsl && rsl == nullptr)
    throw std::invalid_argument(
        "Trainer: rsl flag set but no registered labels given");
  if (cfg_.flags.reps && table == nullptr)
    throw std::invalid_argument(
        "Trainer: reps flag set but no transform table given");

  rsl_by_volume_.assign(train.volumes.size(), nullptr);
  if (rsl != nullptr)
    for (std::size_t i = 0; i < rsl->volumes.size(); ++i)
      rsl_by_volume_[static_cast<std::size_t>(rsl->volumes[i])] =
          &rsl->labels[i];
  grids_.reserve(train.volumes.size());
  for (const auto& v : train.volumes) grids_.push_back(GridSpec::like(v));

  Rng root(cfg_.seed);
  auto models = init_models(spec_a, spec_b, root.child("models").seed());
  model_a_ = std::make_unique<Model>(std::move(models.first));
  model_b_ = std::make_unique<Model>(std::move(models.second));
  opt_a_ = std::make_unique<nn::AdamW>(model_a_->params().params(),
                                       optim_config(cfg_.lr_a, cfg_));
  opt_b_ = std::make_unique<nn::AdamW>(model_b_->params().params(),
                                       optim_config(cfg_.lr_b, cfg_));
  const int capacity = bank_capacity(dataset_slice_count(train));
  bank_a_ = std::make_unique<FeatureBank>(capacity);
  if (!shared()) bank_b_ = std::make_unique<FeatureBank>(capacity);
  batch_rng_ = root.child("batches");
  step_rng_ = root.child("steps");
}

StepRecord Trainer::step() {
  const int half = cfg_.batch / 2;
  const Batch batch = compose_batch(*train_, cfg_.batch, cfg_.augment,
                                    batch_rng_);

  // materialize augmented input planes and labeled ground truth
  std::vector<Array2<double>> planes;
  planes.reserve(batch.size());
  std::vector<Array2<std::int32_t>> gt_planes;  // labeled half only
  for (const auto& item : batch) {
    const auto& vol = train_->volumes[static_cast<std::size_t>(
        item.ref.volume)];
    Array2<double> plane = slice_of(vol, item.ref.index);
    if (item.dihedral != 0) plane = dihedral_apply(plane, item.dihedral);
    planes.push_back(std::move(plane));
    if (item.labeled) {
      Array2<std::int32_t> lab = slice_of(
          train_->labels[static_cast<std::size_t>(item.ref.volume)],
          item.ref.index);
      if (item.dihedral != 0) lab = dihedral_apply(lab, item.dihedral);
      gt_planes.push_back(std::move(lab));
    }
  }
  auto x = make_input(planes);
  const int h = x->shape[2], w = x->shape[3];

  auto out_a = model_a_->forward(x);
  auto out_b = model_b_->forward(x);

  std::vector<int> sup_labels;
  sup_labels.reserve(static_cast<std::size_t>(half) * h * w);
  for (const auto& plane : gt_planes)
    for (std::size_t i = 0; i < plane.size(); ++i)
      sup_labels.push_back(static_cast<int>(plane[i]));

  StepRecord rec;
  rec.iteration = iter_;
  rec.w_cps = w_cps_schedule(iter_, cfg_.t_total);

  auto pl_a = nn::narrow_batch(out_a.prob, 0, half);
  auto pl_b = nn::narrow_batch(out_b.prob, 0, half);
  auto pu_a = nn::narrow_batch(out_a.prob, half, half);
  auto pu_b = nn::narrow_batch(out_b.prob, half, half);

  auto l_sup_a = sup_loss(pl_a, sup_labels);
  auto l_sup_b = sup_loss(pl_b, sup_labels);
  auto l_cps_a = cps_loss(pu_a, pu_b);
  auto l_cps_b = cps_loss(pu_b, pu_a);
  auto loss_a = nn::add(l_sup_a, nn::mul_scalar(l_cps_a, rec.w_cps));
  auto loss_b = nn::add(l_sup_b, nn::mul_scalar(l_cps_b, rec.w_cps));

  NodePtr l_rs_a, l_rs_b;
  if (cfg_.flags.rsl) {
    std::vector<std::optional<Array2<std::int32_t>>> reg_planes;
    reg_planes.reserve(static_cast<std::size_t>(half));
    for (int i = half; i < cfg_.batch; ++i) {
      const auto& item = batch[static_cast<std::size_t>(i)];
      const LabelMap* lm =
          rsl_by_volume_[static_cast<std::size_t>(item.ref.volume)];
      if (lm == nullptr) {
        reg_planes.emplace_back(std::nullopt);
        continue;
      }
      Array2<std::int32_t> plane = slice_of(*lm, item.ref.index);
      if (item.dihedral != 0) plane = dihedral_apply(plane, item.dihedral);
      reg_planes.emplace_back(std::move(plane));
    }
    auto rs_a = rsl_loss(pu_a, reg_planes);
    auto rs_b = rsl_loss(pu_b, reg_planes);
    rec.rsl_missing = rs_a.missing;
    l_rs_a = rs_a.loss;
    l_rs_b = rs_b.loss;
    loss_a = nn::add(loss_a, nn::mul_scalar(l_rs_a, cfg_.w_rs));
    loss_b = nn::add(loss_b, nn::mul_scalar(l_rs_b, cfg_.w_rs));
  }

  NodePtr l_cl_a, l_cl_b;
  if (cfg_.flags.scl) {
    const int stride = cfg_.feature_stride;
    // per model: labeled slices read ground truth, unlabeled slices read the
    // model's own hard predictions
    const auto build_planes = [&](const ForwardOutput& out) {
      std::vector<Array2<std::int32_t>> label_planes;
      label_planes.reserve(batch.size());
      const auto pseudo = argmax_labels(out.prob);
      const long hw = static_cast<long>(h) * w;
      for (int b = 0; b < cfg_.batch; ++b) {
        if (b < half) {
          label_planes.push_back(gt_planes[static_cast<std::size_t>(b)]);
          continue;
        }
        Array2<std::int32_t> plane(h, w);
        for (long p = 0; p < hw; ++p)
          plane[static_cast<std::size_t>(p)] =
              pseudo[static_cast<std::size_t>(b * hw + p)];
        label_planes.push_back(std::move(plane));
      }
      return label_planes;
    };
    const auto planes_a = build_planes(out_a);
    const auto planes_b = build_planes(out_b);
    auto view_a = grid_view(out_a.prob, planes_a, stride);
    auto view_b = grid_view(out_b.prob, planes_b, stride);
    auto sel_a = select_anchors(view_a, cfg_.contrast, step_rng_);
    auto sel_b = select_anchors(view_b, cfg_.contrast, step_rng_);

    auto pool_a = negative_pool(out_a.features, sel_a);
    auto pool_b = negative_pool(out_b.features, sel_b);
    std::map<int, std::vector<Eigen::VectorXd>> negs_a, negs_b;
    if (cfg_.shared_negatives) {
      NegativePool merged = pool_a;
      merge_pools(merged, pool_b);
      negs_a = sample_negatives(merged, cfg_.contrast, step_rng_);
      negs_b = negs_a;
    } else {
      negs_a = sample_negatives(pool_a, cfg_.contrast, step_rng_);
      negs_b = sample_negatives(pool_b, cfg_.contrast, step_rng_);
    }

    const auto positives_for = [&](const ForwardOutput& out,
                                   const AnchorSelection& sel,
                                   const FeatureBank& bank) {
      std::map<int, std::vector<Eigen::VectorXd>> positives;
      const int gh = out.features->shape[2];
      const int gw = out.features->shape[3];
      for (const auto& [cls, cells] : sel.anchors) {
        auto label_key = label_positive_key(out.features, sel.pool.at(cls));
        if (!label_key.has_value()) continue;  // degenerate mean: skip class
        if (!cfg_.flags.reps) {
          positives[cls] = {*label_key};
          continue;
        }
        std::vector<Eigen::VectorXd> per_anchor;
        per_anchor.reserve(cells.size());
        bool ok = true;
        for (const int cell : cells) {
          const int b = cell / (gh * gw);
          const int gy = (cell / gw) % gh, gx = cell % gw;
          const auto& item = batch[static_cast<std::size_t>(b)];
          // feature-cell centre in the augmented plane, mapped back to the
          // volume's own frame
          const double half_off = stride / 2.0 - 0.5;
          const auto [oy, ox] = dihedral_source(
              item.dihedral, gy * stride + half_off, gx * stride + half_off,
              h);
          AnchorPoint point{item.ref.volume,
                            Vec3(static_cast<double>(item.ref.index), oy, ox)};
          auto reg_key = reg_positive_key(point, grids_, *table_, bank,
                                          stride);
          auto combined = combine_positive(*label_key, reg_key,
                                           cfg_.contrast.w1, cfg_.contrast.w2);
          if (!combined.has_value()) {
            ok = false;  // cancelled mixture: skip the class this step
            break;
          }
          per_anchor.push_back(std::move(*combined));
        }
        if (ok) positives[cls] = std::move(per_anchor);
      }
      return positives;
    };
    auto pos_a = positives_for(out_a, sel_a, *bank_a_);
    auto pos_b = positives_for(out_b, sel_b, shared() ? *bank_a_ : *bank_b_);

    l_cl_a = contrastive_loss(out_a.features, sel_a.anchors, pos_a, negs_a,
                              cfg_.contrast);
    l_cl_b = contrastive_loss(out_b.features, sel_b.anchors, pos_b, negs_b,
                              cfg_.contrast);
    loss_a = nn::add(loss_a, nn::mul_scalar(l_cl_a, cfg_.w_cl));
    loss_b = nn::add(loss_b, nn::mul_scalar(l_cl_b, cfg_.w_cl));
  }

  rec.sup_a = scalar(l_sup_a);
  rec.cps_a = scalar(l_cps_a);
  rec.cl_a = scalar(l_cl_a);
  rec.rs_a = scalar(l_rs_a);
  rec.total_a = scalar(loss_a);
  rec.sup_b = scalar(l_sup_b);
  rec.cps_b = scalar(l_cps_b);
  rec.cl_b = scalar(l_cl_b);
  rec.rs_b = scalar(l_rs_b);
  rec.total_b = scalar(loss_b);
  if (!std::isfinite(rec.total_a) || !std::isfinite(rec.total_b)) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss at iteration " << iter_
        << " (sup_a=" << rec.sup_a << " cps_a=" << rec.cps_a
        << " cl_a=" << rec.cl_a << " rs_a=" << rec.rs_a
        << " sup_b=" << rec.sup_b << " cps_b=" << rec.cps_b
        << " cl_b=" << rec.cl_b << " rs_b=" << rec.rs_b << ")";
    throw std::runtime_error(msg.str());
  }

  nn::zero_grads(model_a_->params().params());
  nn::backward(loss_a);
  opt_a_->step();
  nn::zero_grads(model_b_->params().params());
  nn::backward(loss_b);
  opt_b_->step();

  // banks learn this step's features only after both losses are settled
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    const SliceRef key{item.ref.volume, item.ref.index};
    bank_a_->upsert(key, dihedral_restore(
                             feature_map_of(out_a.features,
                                            static_cast<int>(i)),
                             item.dihedral));
    FeatureBank& other = shared() ? *bank_a_ : *bank_b_;
    other.upsert(key, dihedral_restore(
                          feature_map_of(out_b.features,
                                         static_cast<int>(i)),
                          item.dihedral));
  }

  ++iter_;
  return rec;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kBankMagic[8] = {'R', 'S', 'E', 'G', 'B', 'A', 'N', 'K'};

void save_bank(const FeatureBank& bank, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_bank: cannot open " + path);
  f.write(kBankMagic, sizeof(kBankMagic));
  const auto keys = bank.keys_by_age();
  const std::uint32_t n = static_cast<std::uint32_t>(keys.size());
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const auto& key : keys) {
    const FeatureMap* map = bank.find(key);
    const std::int32_t head[5] = {key.volume, key.index, map->channels,
                                  map->height, map->width};
    f.write(reinterpret_cast<const char*>(head), sizeof(head));
    f.write(reinterpret_cast<const char*>(map->data.data()),
            static_cast<std::streamsize>(map->data.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("save_bank: write failed for " + path);
}

void load_bank(FeatureBank& bank, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_bank: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kBankMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_bank: bad header in " + path);
  std::uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  bank.clear();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::int32_t head[5];
    f.read(reinterpret_cast<char*>(head), sizeof(head));
    FeatureMap map(head[2], head[3], head[4]);
    f.read(reinterpret_cast<char*>(map.data.data()),
           static_cast<std::streamsize>(map.data.size() * sizeof(float)));
    bank.upsert({head[0], head[1]}, std::move(map));
  }
  if (!f) throw std::runtime_error("load_bank: truncated file " + path);
}

}  // namespace

void Trainer::save_checkpoint(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  model_a_->save(dir + "/model_a.ckpt");
  model_b_->save(dir + "/model_b.ckpt");
  {
    std::ofstream f(dir + "/optim_a.bin", std::ios::binary);
    opt_a_->save_state(f);
  }
  {
    std::ofstream f(dir + "/optim_b.bin", std::ios::binary);
    opt_b_->save_state(f);
  }
  save_bank(*bank_a_, dir + "/bank_a.bin");
  if (!shared()) save_bank(*bank_b_, dir + "/bank_b.bin");
  nlohmann::json j;
  j["iteration"] = iter_;
  j["batch_rng"] = batch_rng_.state();
  j["step_rng"] = step_rng_.state();
  std::ofstream f(dir + "/trainer.json");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("save_checkpoint: write failed in " + dir);
}

void Trainer::load_checkpoint(const std::string& dir) {
  std::ifstream f(dir + "/trainer.json");
  if (!f)
    throw std::runtime_error("load_checkpoint: missing trainer.json in " +
                             dir);
  nlohmann::json j = nlohmann::json::parse(f);
  iter_ = j.at("iteration").get<int>();
  batch_rng_.restore(j.at("batch_rng").get<std::string>());
  step_rng_.restore(j.at("step_rng").get<std::string>());

  Model a = Model::load(dir + "/model_a.ckpt");
  Model b = Model::load(dir + "/model_b.ckpt");
  model_a_->params().load_flat(a.params().flatten());
  model_b_->params().load_flat(b.params().flatten());
  {
    std::ifstream s(dir + "/optim_a.bin", std::ios::binary);
    if (!s)
      throw std::runtime_error("load_checkpoint: missing optim_a.bin");
    opt_a_->load_state(s);
  }
  {
    std::ifstream s(dir + "/optim_b.bin", std::ios::binary);
    if (!s)
      throw std::runtime_error("load_checkpoint: missing optim_b.bin");
    opt_b_->load_state(s);
  }
  load_bank(*bank_a_, dir + "/bank_a.bin");
  if (!shared()) load_bank(*bank_b_, dir + "/bank_b.bin");
}

// ---- inference ------------------------------------------------------------

Array2<std::int32_t> infer_slice(const Model& a, const Model& b,
                                 const Array2<double>& slice) {
  auto x = make_input({slice});
  auto la = a.forward(x).logits;
  auto lb = b.forward(x).logits;
  const int classes = la->shape[1], h = la->shape[2], w = la->shape[3];
  Array2<std::int32_t> out(h, w);
  const long hw = static_cast<long>(h) * w;
  for (long p = 0; p < hw; ++p) {
    int best = 0;
    double best_v = (la->value(p) + lb->value(p)) / 2.0;
    for (int c = 1; c < classes; ++c) {
      const double v =
          (la->value(c * hw + p) + lb->value(c * hw + p)) / 2.0;
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

LabelMap infer_volume(const Model& a, const Model& b, const Volume& v) {
  LabelMap out;
  out.id = v.id;
  out.spacing = v.spacing;
  out.num_classes = a.spec().num_classes;
  out.voxels = Array3<std::int32_t>(v.dims());
  for (int z = 0; z < v.dims()[0]; ++z) {
    const Array2<std::int32_t> plane = infer_slice(a, b, slice_of(v, z));
    for (int y = 0; y < v.dims()[1]; ++y)
      for (int x = 0; x < v.dims()[2]; ++x)
        out.voxels.at(z, y, x) = plane.at(y, x);
  }
  return out;
}

}  // namespace regseg

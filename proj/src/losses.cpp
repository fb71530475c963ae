// losses.cpp — see losses.hpp.
#include "regseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "regseg/ops.hpp"

namespace regseg {

using nn::Arr;
using nn::NodePtr;

namespace {

constexpr double kDiceEps = 1e-5;
constexpr double kProbFloor = 1e-12;
constexpr double kKeyEps = 1e-8;

void require_prob4(const NodePtr& p, const char* who) {
  if (!p || p->shape.size() != 4)
    throw std::invalid_argument(std::string(who) +
                                ": probability map must be (B,C,H,W)");
}

/// Flat feature-grid cell -> gather location.
nn::GridLoc cell_loc(int cell, int gh, int gw) {
  return {cell / (gh * gw), (cell / gw) % gh, cell % gw};
}

/// Feature vector (values only) at one grid cell.
Eigen::VectorXd cell_feature(const NodePtr& f, int cell) {
  const int c = f->shape[1], gh = f->shape[2], gw = f->shape[3];
  const nn::GridLoc l = cell_loc(cell, gh, gw);
  Eigen::VectorXd v(c);
  for (int k = 0; k < c; ++k)
    v(k) = f->value(((static_cast<long>(l.b) * c + k) * gh + l.y) * gw + l.x);
  return v;
}

std::optional<Eigen::VectorXd> renormalize(Eigen::VectorXd v) {
  const double n = v.norm();
  if (n < kKeyEps) return std::nullopt;
  v /= n;
  return v;
}

}  // namespace

NodePtr one_hot_node(const std::vector<int>& labels, int batch, int classes,
                     int h, int w) {
  const long pixels = static_cast<long>(batch) * h * w;
  if (static_cast<long>(labels.size()) != pixels)
    throw std::invalid_argument("one_hot_node: label count mismatch");
  Arr v = Arr::Zero(pixels * classes);
  const long hw = static_cast<long>(h) * w;
  for (long i = 0; i < pixels; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes)
      throw std::invalid_argument("one_hot_node: label out of range");
    const long b = i / hw, p = i % hw;
    v((b * classes + y) * hw + p) = 1.0;
  }
  return nn::make_leaf({batch, classes, h, w}, std::move(v), false);
}

std::vector<int> argmax_labels(const NodePtr& prob) {
  require_prob4(prob, "argmax_labels");
  const int batch = prob->shape[0], classes = prob->shape[1];
  const long hw = static_cast<long>(prob->shape[2]) * prob->shape[3];
  std::vector<int> out(static_cast<std::size_t>(batch) * hw);
  for (int b = 0; b < batch; ++b)
    for (long p = 0; p < hw; ++p) {
      int best = 0;
      double best_v = prob->value((static_cast<long>(b) * classes) * hw + p);
      for (int c = 1; c < classes; ++c) {
        const double v =
            prob->value((static_cast<long>(b) * classes + c) * hw + p);
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out[static_cast<std::size_t>(b) * hw + p] = best;
    }
  return out;
}

NodePtr dice_loss(const NodePtr& prob, const NodePtr& target) {
  require_prob4(prob, "dice_loss");
  if (target->shape != prob->shape)
    throw std::invalid_argument("dice_loss: shape mismatch");
  auto inter = nn::colsum(nn::sum_spatial_per_class(nn::mul(prob, target)));
  auto psum = nn::colsum(nn::sum_spatial_per_class(prob));
  auto tsum = nn::colsum(nn::sum_spatial_per_class(target));
  auto dice = nn::divide(nn::add_scalar(nn::mul_scalar(inter, 2.0), kDiceEps),
                         nn::add_scalar(nn::add(psum, tsum), kDiceEps));
  return nn::add_scalar(nn::neg(nn::mean_all(dice)), 1.0);
}

NodePtr ce_loss(const NodePtr& prob, const std::vector<int>& labels) {
  require_prob4(prob, "ce_loss");
  auto picked = nn::gather_class_prob(prob, labels);
  return nn::neg(nn::mean_all(nn::vlog(nn::clamp_min(picked, kProbFloor))));
}

NodePtr sup_loss(const NodePtr& prob, const std::vector<int>& labels) {
  require_prob4(prob, "sup_loss");
  auto target = one_hot_node(labels, prob->shape[0], prob->shape[1],
                             prob->shape[2], prob->shape[3]);
  return nn::add(dice_loss(prob, target), ce_loss(prob, labels));
}

NodePtr cps_loss(const NodePtr& prob_self, const NodePtr& prob_other) {
  require_prob4(prob_self, "cps_loss");
  if (prob_other->shape != prob_self->shape)
    throw std::invalid_argument("cps_loss: shape mismatch");
  // argmax over raw values: hard labels carry no graph, so the producer of
  // prob_other stays gradient-free by construction.
  const std::vector<int> pseudo = argmax_labels(prob_other);
  auto target = one_hot_node(pseudo, prob_self->shape[0], prob_self->shape[1],
                             prob_self->shape[2], prob_self->shape[3]);
  return dice_loss(prob_self, target);
}

RslOutcome rsl_loss(
    const NodePtr& prob,
    const std::vector<std::optional<Array2<std::int32_t>>>& reg_labels) {
  require_prob4(prob, "rsl_loss");
  if (static_cast<int>(reg_labels.size()) != prob->shape[0])
    throw std::invalid_argument("rsl_loss: one label plane per slice");
  const int classes = prob->shape[1], h = prob->shape[2], w = prob->shape[3];
  RslOutcome out;
  NodePtr total;
  for (int b = 0; b < prob->shape[0]; ++b) {
    if (!reg_labels[static_cast<std::size_t>(b)].has_value()) {
      ++out.missing;
      continue;
    }
    const auto& plane = *reg_labels[static_cast<std::size_t>(b)];
    if (plane.height() != h || plane.width() != w)
      throw std::invalid_argument("rsl_loss: label plane size mismatch");
    std::vector<int> labels(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < labels.size(); ++i)
      labels[i] = static_cast<int>(plane[i]);
    auto sl = nn::slice_batch(prob, b);
    auto term = nn::add(
        dice_loss(sl, one_hot_node(labels, 1, classes, h, w)),
        ce_loss(sl, labels));
    total = total ? nn::add(total, term) : term;
    ++out.used;
  }
  out.loss = out.used > 0 ? nn::mul_scalar(total, 1.0 / out.used)
                          : nn::zeros({1});
  return out;
}

FeatureGridView grid_view(const NodePtr& prob,
                          const std::vector<Array2<std::int32_t>>& labels,
                          int stride) {
  require_prob4(prob, "grid_view");
  const int batch = prob->shape[0], classes = prob->shape[1];
  const int h = prob->shape[2], w = prob->shape[3];
  if (static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument("grid_view: one label plane per slice");
  if (h % stride != 0 || w % stride != 0)
    throw std::invalid_argument("grid_view: stride must divide the plane");
  FeatureGridView view;
  view.batch = batch;
  view.gh = h / stride;
  view.gw = w / stride;
  const int off = stride / 2;
  view.label.resize(static_cast<std::size_t>(batch) * view.gh * view.gw);
  view.top1.resize(view.label.size());
  std::size_t cell = 0;
  for (int b = 0; b < batch; ++b) {
    const auto& plane = labels[static_cast<std::size_t>(b)];
    if (plane.height() != h || plane.width() != w)
      throw std::invalid_argument("grid_view: label plane size mismatch");
    for (int gy = 0; gy < view.gh; ++gy)
      for (int gx = 0; gx < view.gw; ++gx, ++cell) {
        const int y = gy * stride + off, x = gx * stride + off;
        view.label[cell] = static_cast<int>(plane.at(y, x));
        double best = 0.0;
        for (int c = 0; c < classes; ++c)
          best = std::max(
              best,
              prob->value(((static_cast<long>(b) * classes + c) * h + y) * w +
                          x));
        view.top1[cell] = best;
      }
  }
  return view;
}

AnchorSelection select_anchors(const FeatureGridView& view,
                               const ContrastConfig& cfg, Rng& rng) {
  AnchorSelection sel;
  for (std::size_t cell = 0; cell < view.label.size(); ++cell)
    if (view.top1[cell] > cfg.threshold)
      sel.pool[view.label[cell]].push_back(static_cast<int>(cell));
  for (const auto& [cls, cells] : sel.pool) {
    const int n = static_cast<int>(cells.size());
    const int k = std::min(cfg.anchor_samples, n);
    auto picks = rng.sample_without_replacement(n, k);
    std::sort(picks.begin(), picks.end());
    auto& out = sel.anchors[cls];
    out.reserve(static_cast<std::size_t>(k));
    for (const int i : picks) out.push_back(cells[static_cast<std::size_t>(i)]);
  }
  return sel;
}

std::optional<Eigen::VectorXd> label_positive_key(
    const NodePtr& features, const std::vector<int>& cells) {
  if (cells.empty()) return std::nullopt;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(features->shape[1]);
  for (const int cell : cells) mean += cell_feature(features, cell);
  mean /= static_cast<double>(cells.size());
  return renormalize(std::move(mean));
}

std::optional<Eigen::VectorXd> reg_positive_key(
    const AnchorPoint& p, const std::vector<GridSpec>& grids,
    const TransformTable& table, const FeatureBank& bank, int stride) {
  if (p.volume < 0 || p.volume >= static_cast<int>(grids.size()))
    throw std::invalid_argument("reg_positive_key: volume index out of range");
  const Spacing& sp_q = grids[static_cast<std::size_t>(p.volume)].spacing;
  const Vec3 phys_q(p.voxel[0] * sp_q[0], p.voxel[1] * sp_q[1],
                    p.voxel[2] * sp_q[2]);
  const double half = stride / 2.0 - 0.5;  // feature-cell centre offset
  Eigen::VectorXd sum;
  int found = 0;
  for (int j = 0; j < static_cast<int>(grids.size()); ++j) {
    if (j == p.volume || !table.has(p.volume, j)) continue;
    const Vec3 phys_j = apply_point(table.get(p.volume, j), phys_q);
    const Spacing& sp_j = grids[static_cast<std::size_t>(j)].spacing;
    const Vec3 vox_j(phys_j[0] / sp_j[0], phys_j[1] / sp_j[1],
                     phys_j[2] / sp_j[2]);
    const FeatureMap* map = bank.lookup(j, vox_j[0]);
    if (map == nullptr) continue;
    // in-plane voxel -> feature-grid coordinate, clamped to the map edge
    const auto grid_coord = [&](double v, int extent) {
      return std::clamp((v - half) / stride, 0.0,
                        static_cast<double>(extent - 1));
    };
    const double gy = grid_coord(vox_j[1], map->height);
    const double gx = grid_coord(vox_j[2], map->width);
    const int y0 = static_cast<int>(std::floor(gy));
    const int x0 = static_cast<int>(std::floor(gx));
    const int y1 = std::min(y0 + 1, map->height - 1);
    const int x1 = std::min(x0 + 1, map->width - 1);
    const double fy = gy - y0, fx = gx - x0;
    Eigen::VectorXd s(map->channels);
    for (int c = 0; c < map->channels; ++c) {
      const double a = (1 - fy) * ((1 - fx) * map->at(c, y0, x0) +
                                   fx * map->at(c, y0, x1));
      const double b = fy * ((1 - fx) * map->at(c, y1, x0) +
                             fx * map->at(c, y1, x1));
      s(c) = a + b;
    }
    if (found == 0)
      sum = s;
    else
      sum += s;
    ++found;
  }
  if (found == 0) return std::nullopt;
  sum /= static_cast<double>(found);
  return renormalize(std::move(sum));
}

std::optional<Eigen::VectorXd> combine_positive(
    const Eigen::VectorXd& label_key,
    const std::optional<Eigen::VectorXd>& reg_key, double w1, double w2) {
  if (!reg_key.has_value()) return label_key;  // verbatim pass-through
  if (reg_key->size() != label_key.size())
    throw std::invalid_argument("combine_positive: key dimensions differ");
  return renormalize(w1 * label_key + w2 * (*reg_key));
}

NegativePool negative_pool(const NodePtr& features,
                           const AnchorSelection& sel) {
  NegativePool pool;
  for (const auto& [cls, cells] : sel.pool) {
    auto& vecs = pool[cls];
    vecs.reserve(cells.size());
    for (const int cell : cells) vecs.push_back(cell_feature(features, cell));
  }
  return pool;
}

void merge_pools(NegativePool& into, const NegativePool& from) {
  for (const auto& [cls, vecs] : from) {
    auto& dst = into[cls];
    dst.insert(dst.end(), vecs.begin(), vecs.end());
  }
}

std::map<int, std::vector<Eigen::VectorXd>> sample_negatives(
    const NegativePool& pool, const ContrastConfig& cfg, Rng& rng) {
  std::map<int, std::vector<Eigen::VectorXd>> out;
  const int present = static_cast<int>(pool.size());
  if (present < 2) return out;
  const int cap = (cfg.negative_samples + present - 2) / (present - 1);
  for (const auto& [cls, own] : pool) {
    auto& negs = out[cls];
    for (const auto& [other, vecs] : pool) {
      if (other == cls) continue;
      const int n = static_cast<int>(vecs.size());
      const int k = std::min(cap, n);
      for (const int i : rng.sample_without_replacement(n, k))
        negs.push_back(vecs[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

NodePtr contrastive_loss(
    const NodePtr& features,
    const std::map<int, std::vector<int>>& anchors,
    const std::map<int, std::vector<Eigen::VectorXd>>& positives,
    const std::map<int, std::vector<Eigen::VectorXd>>& negatives,
    const ContrastConfig& cfg) {
  if (!features || features->shape.size() != 4)
    throw std::invalid_argument("contrastive_loss: features must be 4D");
  if (cfg.temperature <= 0.0)
    throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  const int dim = features->shape[1];
  const int gh = features->shape[2], gw = features->shape[3];
  const double inv_tau = 1.0 / cfg.temperature;

  NodePtr total;
  int contributing = 0;
  for (const auto& [cls, cells] : anchors) {
    if (cells.empty()) continue;
    const int n = static_cast<int>(cells.size());
    const auto pos_it = positives.find(cls);
    if (pos_it == positives.end() || pos_it->second.empty()) continue;
    const auto& pos = pos_it->second;
    if (static_cast<int>(pos.size()) != 1 &&
        static_cast<int>(pos.size()) != n)
      throw std::invalid_argument(
          "contrastive_loss: positives must be shared or one per anchor");
    const auto neg_it = negatives.find(cls);
    if (neg_it == negatives.end() || neg_it->second.empty()) continue;
    const auto& negs = neg_it->second;

    std::vector<nn::GridLoc> locs;
    locs.reserve(cells.size());
    for (const int cell : cells) locs.push_back(cell_loc(cell, gh, gw));
    auto a = nn::gather_locations(features, locs);  // (n, dim), with grads

    const int m = static_cast<int>(negs.size());
    Arr keys(static_cast<long>(m) * dim);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < dim; ++c)
        keys(static_cast<long>(r) * dim + c) =
            negs[static_cast<std::size_t>(r)](c);
    auto key_node = nn::make_leaf({m, dim}, std::move(keys), false);
    Arr pos_rows(static_cast<long>(n) * dim);
    for (int r = 0; r < n; ++r) {
      const auto& v = pos.size() == 1 ? pos[0]
                                      : pos[static_cast<std::size_t>(r)];
      for (int c = 0; c < dim; ++c)
        pos_rows(static_cast<long>(r) * dim + c) = v(c);
    }
    auto pos_node = nn::make_leaf({n, dim}, std::move(pos_rows), false);

    auto neg_scores = nn::mul_scalar(nn::matmul_nt(a, key_node), inv_tau);
    auto pos_score =
        nn::mul_scalar(nn::rowwise_dot(a, pos_node), inv_tau);  // {n}
    auto all_scores =
        nn::concat_cols(nn::reshape(pos_score, {n, 1}), neg_scores);
    auto per_anchor = nn::sub(nn::logsumexp_rows(all_scores), pos_score);
    auto cls_loss = nn::mean_all(per_anchor);
    total = total ? nn::add(total, cls_loss) : cls_loss;
    ++contributing;
  }
  if (contributing == 0) return nn::zeros({1});
  return nn::mul_scalar(total, 1.0 / contributing);
}

}  // namespace regseg

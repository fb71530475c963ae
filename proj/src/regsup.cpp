// regsup.cpp — see regsup.hpp.
#include "regseg/regsup.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "regseg/resample.hpp"
#include "regseg/similarity.hpp"

namespace regseg {
namespace {
using nlohmann::json;
namespace fs = std::filesystem;
}  // namespace

CycleScore cycle_score(const Volume& v, const Transform& t_ab,
                       const Transform& t_ba, const GridSpec& grid_b,
                       const CycleWeights& w) {
  const Volume there = resample(v, t_ab, grid_b);
  const Volume back = resample(there, t_ba, GridSpec::like(v));

  const auto [lo, hi] =
      std::minmax_element(v.voxels.data(), v.voxels.data() + v.voxels.size());
  const double range = *hi - *lo;

  CycleScore s;
  const double raw = rmse(v.voxels, back.voxels);
  s.rmse_term = range > 0.0 ? raw / range : raw;
  s.mi_term = 1.0 - mutual_information(v.voxels, back.voxels);
  s.composite = w.w_rmse * s.rmse_term + w.w_mi * s.mi_term;
  return s;
}

SourceChoice select_best_labeled(int j, const Dataset& train,
                                 const TransformTable& table,
                                 const CycleWeights& w) {
  if (train.labeled.empty())
    throw std::invalid_argument("select_best_labeled: no labeled volumes");
  SourceChoice out;
  if (train.labeled.size() == 1) {
    out.source = train.labeled.front();
    out.scored = false;
    return out;
  }
  out.scored = true;
  double best = 0.0;
  for (const int q : train.labeled) {
    if (!table.has(j, q) || !table.has(q, j))
      throw std::runtime_error(
          "select_best_labeled: transform table lacks a (j,q) pair");
    const CycleScore s =
        cycle_score(train.volumes[j], table.get(j, q), table.get(q, j),
                    GridSpec::like(train.volumes[q]), w);
    out.scores[q] = s;
    if (out.source < 0 || s.composite < best) {
      best = s.composite;
      out.source = q;  // ascending loop order breaks ties to the lower index
    }
  }
  return out;
}

LabelMap make_registered_labels(const LabelMap& y_q, const Transform& t_qj,
                                const GridSpec& grid_j) {
  return resample(y_q, t_qj, grid_j);
}

RegisteredLabels prepare_rsl(const Dataset& train, const TransformTable& table,
                             const CycleWeights& w) {
  RegisteredLabels out;
  for (const int j : train.unlabeled) {
    const SourceChoice choice = select_best_labeled(j, train, table, w);
    const int q = choice.source;
    if (!table.has(q, j))
      throw std::runtime_error("prepare_rsl: missing source->target transform");
    LabelMap r = make_registered_labels(train.labels[q], table.get(q, j),
                                        GridSpec::like(train.volumes[j]));
    r.id = train.volumes[j].id;
    out.volumes.push_back(j);
    out.labels.push_back(std::move(r));
    out.choices.push_back(choice);
  }
  return out;
}

void save_registered_labels(const RegisteredLabels& r, const Dataset& train,
                            const std::string& dir) {
  fs::create_directories(fs::path(dir) / "rsl_labels");
  json root;
  for (std::size_t n = 0; n < r.volumes.size(); ++n) {
    const std::string& id = train.volumes[r.volumes[n]].id;
    save_labels(r.labels[n],
                (fs::path(dir) / "rsl_labels" / (id + ".lab.bin")).string());
    json entry;
    entry["source"] = train.volumes[r.choices[n].source].id;
    entry["scored"] = r.choices[n].scored;
    json scores;
    for (const auto& [q, s] : r.choices[n].scores) {
      scores[train.volumes[q].id] = {{"rmse_term", s.rmse_term},
                                     {"mi_term", s.mi_term},
                                     {"composite", s.composite}};
    }
    entry["scores"] = scores;
    root["unlabeled"][id] = entry;
  }
  std::ofstream os(fs::path(dir) / "brs.json");
  os << root.dump(2) << "\n";
}

RegisteredLabels load_registered_labels(const Dataset& train,
                                        const std::string& dir) {
  std::ifstream is(fs::path(dir) / "brs.json");
  if (!is)
    throw std::runtime_error("load_registered_labels: no brs.json in " + dir);
  json root;
  is >> root;

  auto index_of = [&](const std::string& id) {
    for (std::size_t v = 0; v < train.volumes.size(); ++v)
      if (train.volumes[v].id == id) return static_cast<int>(v);
    throw std::runtime_error("load_registered_labels: unknown id " + id);
  };

  RegisteredLabels out;
  for (const int j : train.unlabeled) {
    const std::string& id = train.volumes[j].id;
    if (!root["unlabeled"].contains(id))
      throw std::runtime_error("load_registered_labels: no entry for " + id);
    const json& entry = root["unlabeled"][id];
    out.volumes.push_back(j);
    out.labels.push_back(load_labels(
        (fs::path(dir) / "rsl_labels" / (id + ".lab.bin")).string()));
    SourceChoice c;
    c.source = index_of(entry["source"]);
    c.scored = entry["scored"];
    out.choices.push_back(c);
  }
  return out;
}

}  // namespace regseg

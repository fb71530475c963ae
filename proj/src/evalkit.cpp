// evalkit.cpp — see evalkit.hpp.
#include "regseg/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

#include "regseg/losses.hpp"

namespace regseg {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Pix {
  int a = 0, b = 0;  // (y, x) in-plane or (z·0+…) — see callers
};

/// In-plane boundary of mask==cls on slice k: pixels of the class with a
/// 4-neighbour of another class or on the image edge.
std::vector<Pix> slice_boundary(const Array3<std::int32_t>& m, int k,
                                int cls) {
  const Dims d = m.dims();
  std::vector<Pix> out;
  for (int y = 0; y < d[1]; ++y)
    for (int x = 0; x < d[2]; ++x) {
      if (m.at(k, y, x) != cls) continue;
      const bool rim =
          y == 0 || x == 0 || y == d[1] - 1 || x == d[2] - 1 ||
          m.at(k, y - 1, x) != cls || m.at(k, y + 1, x) != cls ||
          m.at(k, y, x - 1) != cls || m.at(k, y, x + 1) != cls;
      if (rim) out.push_back({y, x});
    }
  return out;
}

void pool_nearest_2d(const std::vector<Pix>& from, const std::vector<Pix>& to,
                     double sy, double sx, std::vector<double>& pool) {
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dy = (p.a - q.a) * sy, dx = (p.b - q.b) * sx;
      best = std::min(best, dy * dy + dx * dx);
    }
    pool.push_back(std::sqrt(best));
  }
}

double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * (static_cast<double>(v.size()) - 1.0);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double t = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - t) + v[lo + 1] * t;
}

struct Vox {
  int z = 0, y = 0, x = 0;
};

std::vector<Vox> volume_boundary(const Array3<std::int32_t>& m, int cls) {
  const Dims d = m.dims();
  std::vector<Vox> out;
  for (int z = 0; z < d[0]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[2]; ++x) {
        if (m.at(z, y, x) != cls) continue;
        const bool rim =
            z == 0 || y == 0 || x == 0 || z == d[0] - 1 || y == d[1] - 1 ||
            x == d[2] - 1 || m.at(z - 1, y, x) != cls ||
            m.at(z + 1, y, x) != cls || m.at(z, y - 1, x) != cls ||
            m.at(z, y + 1, x) != cls || m.at(z, y, x - 1) != cls ||
            m.at(z, y, x + 1) != cls;
        if (rim) out.push_back({z, y, x});
      }
  return out;
}

void pool_nearest_3d(const std::vector<Vox>& from, const std::vector<Vox>& to,
                     const Spacing& s, std::vector<double>& pool) {
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dz = (p.z - q.z) * s[0], dy = (p.y - q.y) * s[1],
                   dx = (p.x - q.x) * s[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    pool.push_back(std::sqrt(best));
  }
}

void require_same_grid(const Array3<std::int32_t>& a,
                       const Array3<std::int32_t>& b, const char* who) {
  if (a.dims() != b.dims())
    throw std::invalid_argument(std::string(who) +
                                ": masks live on different grids");
}

}  // namespace

// ---- metrics --------------------------------------------------------------

double dsc(const Array3<std::int32_t>& pred, const Array3<std::int32_t>& gt,
           int cls) {
  require_same_grid(pred, gt, "dsc");
  long np = 0, ng = 0, ni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, g = gt[i] == cls;
    np += p;
    ng += g;
    ni += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

Hd95 hd95(const Array3<std::int32_t>& pred, const Array3<std::int32_t>& gt,
          int cls, const Spacing& spacing, bool volumetric) {
  require_same_grid(pred, gt, "hd95");
  Hd95 out;
  if (volumetric) {
    const auto bp = volume_boundary(pred, cls);
    const auto bg = volume_boundary(gt, cls);
    if (bp.empty() || bg.empty()) return out;
    std::vector<double> pool;
    pool.reserve(bp.size() + bg.size());
    pool_nearest_3d(bp, bg, spacing, pool);
    pool_nearest_3d(bg, bp, spacing, pool);
    out.value = percentile95(std::move(pool));
    out.defined = true;
    return out;
  }
  double acc = 0.0;
  int covered = 0;
  for (int k = 0; k < pred.dims()[0]; ++k) {
    const auto bp = slice_boundary(pred, k, cls);
    const auto bg = slice_boundary(gt, k, cls);
    if (bp.empty() || bg.empty()) continue;
    std::vector<double> pool;
    pool.reserve(bp.size() + bg.size());
    pool_nearest_2d(bp, bg, spacing[1], spacing[2], pool);
    pool_nearest_2d(bg, bp, spacing[1], spacing[2], pool);
    acc += percentile95(std::move(pool));
    ++covered;
  }
  if (covered > 0) {
    out.value = acc / covered;
    out.defined = true;
  }
  return out;
}

MetricReport evaluate_case(const LabelMap& pred, const LabelMap& gt,
                           const std::string& case_id, int iteration,
                           bool volumetric_hd) {
  if (gt.num_classes < 2)
    throw std::invalid_argument("evaluate_case: need foreground classes");
  require_same_grid(pred.voxels, gt.voxels, "evaluate_case");
  MetricReport rep;
  rep.case_id = case_id;
  rep.iteration = iteration;
  double dsc_acc = 0.0, hd_acc = 0.0;
  for (int c = 1; c < gt.num_classes; ++c) {
    ClassMetric cm;
    cm.cls = c;
    cm.dsc = dsc(pred.voxels, gt.voxels, c);
    cm.hd95 = hd95(pred.voxels, gt.voxels, c, gt.spacing, volumetric_hd);
    dsc_acc += cm.dsc;
    if (cm.hd95.defined) {
      hd_acc += cm.hd95.value;
      ++rep.hd95_defined;
    }
    rep.per_class.push_back(cm);
  }
  rep.mean_dsc = dsc_acc / static_cast<double>(rep.per_class.size());
  if (rep.hd95_defined > 0) rep.mean_hd95 = hd_acc / rep.hd95_defined;
  return rep;
}

// ---- pseudo-label quality -------------------------------------------------

Array2<std::int32_t> predict_slice(const Model& m,
                                   const Array2<double>& slice) {
  auto out = m.forward(make_input({slice}));
  const auto hard = argmax_labels(out.prob);
  Array2<std::int32_t> plane(slice.height(), slice.width());
  for (std::size_t i = 0; i < plane.size(); ++i)
    plane[i] = hard[i];
  return plane;
}

double pseudo_label_dsc(const Model& m, const Dataset& train,
                        const std::vector<LabelMap>& oracle) {
  if (train.unlabeled.empty())
    throw std::invalid_argument("pseudo_label_dsc: no unlabeled volumes");
  if (oracle.size() != train.volumes.size())
    throw std::invalid_argument(
        "pseudo_label_dsc: oracle must cover every volume");
  double acc = 0.0;
  for (const int v : train.unlabeled) {
    const auto& vol = train.volumes[static_cast<std::size_t>(v)];
    const auto& truth = oracle[static_cast<std::size_t>(v)];
    Array3<std::int32_t> pred(vol.dims());
    for (int z = 0; z < vol.dims()[0]; ++z) {
      const auto plane = predict_slice(m, slice_of(vol, z));
      for (int y = 0; y < vol.dims()[1]; ++y)
        for (int x = 0; x < vol.dims()[2]; ++x)
          pred.at(z, y, x) = plane.at(y, x);
    }
    double vol_acc = 0.0;
    for (int c = 1; c < truth.num_classes; ++c)
      vol_acc += dsc(pred, truth.voxels, c);
    acc += vol_acc / (truth.num_classes - 1);
  }
  return acc / static_cast<double>(train.unlabeled.size());
}

PseudoQualitySeries track_pseudo_quality(Trainer& t,
                                         const std::vector<LabelMap>& oracle,
                                         int steps, int every_n) {
  if (every_n < 1)
    throw std::invalid_argument("track_pseudo_quality: every_n < 1");
  PseudoQualitySeries series;
  for (int s = 0; s < steps; ++s) {
    t.step();
    if (t.iteration() % every_n != 0) continue;
    series.iterations.push_back(t.iteration());
    series.model_a.push_back(
        pseudo_label_dsc(t.model_a(), t.train(), oracle));
    series.model_b.push_back(
        pseudo_label_dsc(t.model_b(), t.train(), oracle));
  }
  return series;
}

// ---- run artifacts --------------------------------------------------------

void write_losses_csv(const std::vector<StepRecord>& records,
                      const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_losses_csv: cannot open " + path);
  f << "iteration,w_cps,sup_a,cps_a,cl_a,rs_a,total_a,"
       "sup_b,cps_b,cl_b,rs_b,total_b,rsl_missing\n";
  for (const auto& r : records)
    f << r.iteration << ',' << fmt(r.w_cps) << ',' << fmt(r.sup_a) << ','
      << fmt(r.cps_a) << ',' << fmt(r.cl_a) << ',' << fmt(r.rs_a) << ','
      << fmt(r.total_a) << ',' << fmt(r.sup_b) << ',' << fmt(r.cps_b) << ','
      << fmt(r.cl_b) << ',' << fmt(r.rs_b) << ',' << fmt(r.total_b) << ','
      << r.rsl_missing << '\n';
  if (!f) throw std::runtime_error("write_losses_csv: write failed " + path);
}

void write_metrics_csv(const std::vector<MetricReport>& reports,
                       const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  f << "iteration,case,cls,dsc,hd95,hd95_defined\n";
  for (const auto& rep : reports)
    for (const auto& cm : rep.per_class)
      f << rep.iteration << ',' << rep.case_id << ',' << cm.cls << ','
        << fmt(cm.dsc) << ',' << fmt(cm.hd95.value) << ','
        << (cm.hd95.defined ? 1 : 0) << '\n';
  if (!f) throw std::runtime_error("write_metrics_csv: write failed " + path);
}

std::vector<MetricReport> read_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_metrics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) ||
      line != "iteration,case,cls,dsc,hd95,hd95_defined")
    throw std::runtime_error("read_metrics_csv: bad header in " + path);
  // rows group into reports by (iteration, case) in file order
  std::vector<MetricReport> reports;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    MetricReport probe;
    ClassMetric cm;
    std::getline(ss, field, ',');
    probe.iteration = std::stoi(field);
    std::getline(ss, probe.case_id, ',');
    std::getline(ss, field, ',');
    cm.cls = std::stoi(field);
    std::getline(ss, field, ',');
    cm.dsc = std::stod(field);
    std::getline(ss, field, ',');
    cm.hd95.value = std::stod(field);
    std::getline(ss, field, ',');
    cm.hd95.defined = field == "1";
    if (reports.empty() || reports.back().iteration != probe.iteration ||
        reports.back().case_id != probe.case_id) {
      reports.push_back(std::move(probe));
    }
    reports.back().per_class.push_back(cm);
  }
  for (auto& rep : reports) {
    double dsc_acc = 0.0, hd_acc = 0.0;
    for (const auto& cm : rep.per_class) {
      dsc_acc += cm.dsc;
      if (cm.hd95.defined) {
        hd_acc += cm.hd95.value;
        ++rep.hd95_defined;
      }
    }
    rep.mean_dsc = dsc_acc / static_cast<double>(rep.per_class.size());
    if (rep.hd95_defined > 0) rep.mean_hd95 = hd_acc / rep.hd95_defined;
  }
  return reports;
}

void write_pseudo_quality_csv(const PseudoQualitySeries& series,
                              const std::string& path) {
  std::ofstream f(path);
  if (!f)
    throw std::runtime_error("write_pseudo_quality_csv: cannot open " + path);
  f << "iteration,dsc_a,dsc_b\n";
  for (std::size_t i = 0; i < series.iterations.size(); ++i)
    f << series.iterations[i] << ',' << fmt(series.model_a[i]) << ','
      << fmt(series.model_b[i]) << '\n';
  if (!f)
    throw std::runtime_error("write_pseudo_quality_csv: write failed " +
                             path);
}

std::vector<AblationRow> ablation_table(
    const std::vector<std::string>& run_dirs) {
  if (run_dirs.size() < 2)
    throw std::invalid_argument("ablation_table: need at least two runs");
  using Key = std::tuple<bool, bool, bool, bool>;
  struct Group {
    int seeds = 0;
    double dsc_acc = 0.0, hd_acc = 0.0;
    int hd_runs = 0;
  };
  std::map<Key, Group> groups;
  for (const auto& dir : run_dirs) {
    std::ifstream cf(dir + "/config.json");
    if (!cf)
      throw std::runtime_error("ablation_table: missing config.json in " +
                               dir);
    const auto j = nlohmann::json::parse(cf);
    const auto& fl = j.at("train").at("flags");
    const Key key{fl.at("rsl").get<bool>(), fl.at("brs").get<bool>(),
                  fl.at("scl").get<bool>(), fl.at("reps").get<bool>()};
    const auto reports = read_metrics_csv(dir + "/metrics.csv");
    if (reports.empty())
      throw std::runtime_error("ablation_table: empty metrics in " + dir);
    double dsc_acc = 0.0, hd_acc = 0.0;
    int hd_cases = 0;
    for (const auto& rep : reports) {
      dsc_acc += rep.mean_dsc;
      if (rep.hd95_defined > 0) {
        hd_acc += rep.mean_hd95;
        ++hd_cases;
      }
    }
    auto& g = groups[key];
    ++g.seeds;
    g.dsc_acc += dsc_acc / static_cast<double>(reports.size());
    if (hd_cases > 0) {
      g.hd_acc += hd_acc / hd_cases;
      ++g.hd_runs;
    }
  }
  std::vector<AblationRow> rows;
  for (const auto& [key, g] : groups) {
    AblationRow row;
    row.flags.rsl = std::get<0>(key);
    row.flags.brs = std::get<1>(key);
    row.flags.scl = std::get<2>(key);
    row.flags.reps = std::get<3>(key);
    row.seeds = g.seeds;
    row.mean_dsc = g.dsc_acc / g.seeds;
    row.hd95_defined = g.hd_runs;
    if (g.hd_runs > 0) row.mean_hd95 = g.hd_acc / g.hd_runs;
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_ablation_csv: cannot open " + path);
  f << "rsl,brs,scl,reps,seeds,mean_dsc,mean_hd95,hd95_defined\n";
  for (const auto& r : rows)
    f << (r.flags.rsl ? 1 : 0) << ',' << (r.flags.brs ? 1 : 0) << ','
      << (r.flags.scl ? 1 : 0) << ',' << (r.flags.reps ? 1 : 0) << ','
      << r.seeds << ',' << fmt(r.mean_dsc) << ',' << fmt(r.mean_hd95) << ','
      << r.hd95_defined << '\n';
  if (!f) throw std::runtime_error("write_ablation_csv: write failed " + path);
}

// ---- plots ----------------------------------------------------------------

namespace {

constexpr int kPlotW = 720, kPlotH = 480;
constexpr int kMarginL = 70, kMarginR = 30, kMarginT = 50, kMarginB = 50;
const char* kPalette[6] = {"#4063d8", "#cb3c33", "#389826", "#9558b2",
                           "#e57000", "#17becf"};

void span_of(const std::vector<PlotSeries>& series, double& lo, double& hi,
             bool x_axis) {
  lo = std::numeric_limits<double>::infinity();
  hi = -lo;
  for (const auto& s : series)
    for (const double v : x_axis ? s.x : s.y) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi == lo) hi = lo + 1.0;
}

}  // namespace

void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::vector<PlotSeries>& series) {
  std::ofstream f(path);
  if (!f)
    throw std::runtime_error("write_line_plot_svg: cannot open " + path);
  double x0, x1, y0, y1;
  span_of(series, x0, x1, true);
  span_of(series, y0, y1, false);
  const auto px = [&](double x) {
    return kMarginL + (x - x0) / (x1 - x0) * (kPlotW - kMarginL - kMarginR);
  };
  const auto py = [&](double y) {
    return kPlotH - kMarginB -
           (y - y0) / (y1 - y0) * (kPlotH - kMarginT - kMarginB);
  };
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW
    << "\" height=\"" << kPlotH << "\" viewBox=\"0 0 " << kPlotW << ' '
    << kPlotH << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << kPlotW / 2 << "\" y=\"28\" text-anchor=\"middle\" "
       "font-family=\"sans-serif\" font-size=\"16\">"
    << title << "</text>\n";
  // axes with end labels
  f << "<line x1=\"" << kMarginL << "\" y1=\"" << kPlotH - kMarginB
    << "\" x2=\"" << kPlotW - kMarginR << "\" y2=\"" << kPlotH - kMarginB
    << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << kMarginL << "\" y1=\"" << kMarginT << "\" x2=\""
    << kMarginL << "\" y2=\"" << kPlotH - kMarginB
    << "\" stroke=\"black\"/>\n";
  f << "<text x=\"" << kMarginL << "\" y=\"" << kPlotH - kMarginB + 18
    << "\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(x0)
    << "</text>\n";
  f << "<text x=\"" << kPlotW - kMarginR << "\" y=\"" << kPlotH - kMarginB + 18
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
    << fmt(x1) << "</text>\n";
  f << "<text x=\"" << kMarginL - 6 << "\" y=\"" << kPlotH - kMarginB
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
    << fmt(y0) << "</text>\n";
  f << "<text x=\"" << kMarginL - 6 << "\" y=\"" << kMarginT + 4
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
    << fmt(y1) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& sr = series[s];
    const char* color = kPalette[s % 6];
    f << "<polyline fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < sr.x.size(); ++i)
      f << px(sr.x[i]) << ',' << py(sr.y[i]) << ' ';
    f << "\"/>\n";
    f << "<text x=\"" << kPlotW - kMarginR - 4 << "\" y=\""
      << kMarginT + 16 * (static_cast<int>(s) + 1)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" "
         "fill=\""
      << color << "\">" << sr.name << "</text>\n";
  }
  f << "</svg>\n";
  if (!f)
    throw std::runtime_error("write_line_plot_svg: write failed " + path);
}

void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<std::string>& labels,
                         const std::vector<double>& values) {
  if (labels.size() != values.size())
    throw std::invalid_argument("write_bar_chart_svg: label/value mismatch");
  std::ofstream f(path);
  if (!f)
    throw std::runtime_error("write_bar_chart_svg: cannot open " + path);
  double hi = 0.0;
  for (const double v : values) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;
  const int n = static_cast<int>(values.size());
  const double span = kPlotW - kMarginL - kMarginR;
  const double slot = span / std::max(n, 1);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW
    << "\" height=\"" << kPlotH << "\" viewBox=\"0 0 " << kPlotW << ' '
    << kPlotH << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << kPlotW / 2 << "\" y=\"28\" text-anchor=\"middle\" "
       "font-family=\"sans-serif\" font-size=\"16\">"
    << title << "</text>\n";
  f << "<line x1=\"" << kMarginL << "\" y1=\"" << kPlotH - kMarginB
    << "\" x2=\"" << kPlotW - kMarginR << "\" y2=\"" << kPlotH - kMarginB
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i < n; ++i) {
    const double h =
        values[static_cast<std::size_t>(i)] / hi *
        (kPlotH - kMarginT - kMarginB);
    const double x = kMarginL + slot * i + slot * 0.15;
    f << "<rect x=\"" << x << "\" y=\"" << kPlotH - kMarginB - h
      << "\" width=\"" << slot * 0.7 << "\" height=\"" << h << "\" fill=\""
      << kPalette[i % 6] << "\"/>\n";
    f << "<text x=\"" << x + slot * 0.35 << "\" y=\""
      << kPlotH - kMarginB + 16
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">"
      << labels[static_cast<std::size_t>(i)] << "</text>\n";
    f << "<text x=\"" << x + slot * 0.35 << "\" y=\""
      << kPlotH - kMarginB - h - 4
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">"
      << fmt(values[static_cast<std::size_t>(i)]) << "</text>\n";
  }
  f << "</svg>\n";
  if (!f)
    throw std::runtime_error("write_bar_chart_svg: write failed " + path);
}

}  // namespace regseg

// similarity.cpp — see similarity.hpp.
#include "regseg/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace regseg {
namespace {

// xlogx with the 0 log 0 = 0 convention.
double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

int bin_of(double v, double lo, double inv_width, int bins) {
  const int b = static_cast<int>((v - lo) * inv_width);
  return std::clamp(b, 0, bins - 1);
}

}  // namespace

double mutual_information(const Array3<double>& a, const Array3<double>& b,
                          int bins) {
  if (a.size() != b.size() || a.size() == 0)
    throw std::invalid_argument("mutual_information: size mismatch");
  if (bins < 2) throw std::invalid_argument("mutual_information: bins < 2");

  const auto [amin_it, amax_it] =
      std::minmax_element(a.data(), a.data() + a.size());
  const auto [bmin_it, bmax_it] =
      std::minmax_element(b.data(), b.data() + b.size());
  const double alo = *amin_it, ahi = *amax_it;
  const double blo = *bmin_it, bhi = *bmax_it;
  if (ahi <= alo || bhi <= blo) return 0.0;  // constant image: zero entropy

  const double ainv = bins / (ahi - alo), binv = bins / (bhi - blo);
  std::vector<double> joint(static_cast<std::size_t>(bins) * bins, 0.0);
  const double w = 1.0 / static_cast<double>(a.size());
  for (std::size_t n = 0; n < a.size(); ++n) {
    const int ba = bin_of(a[n], alo, ainv, bins);
    const int bb = bin_of(b[n], blo, binv, bins);
    joint[static_cast<std::size_t>(ba) * bins + bb] += w;
  }

  std::vector<double> pa(bins, 0.0), pb(bins, 0.0);
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j) {
      const double p = joint[static_cast<std::size_t>(i) * bins + j];
      pa[i] += p;
      pb[j] += p;
    }

  double ha = 0.0, hb = 0.0;
  for (int i = 0; i < bins; ++i) ha -= xlogx(pa[i]);
  for (int j = 0; j < bins; ++j) hb -= xlogx(pb[j]);

  // Joint entropy summed over unordered bin pairs, so swapping the inputs
  // (which transposes the histogram) sums the same floats and the result is
  // bit-identical.
  double hab = 0.0;
  for (int i = 0; i < bins; ++i) {
    hab -= xlogx(joint[static_cast<std::size_t>(i) * bins + i]);
    for (int j = i + 1; j < bins; ++j) {
      const double u = joint[static_cast<std::size_t>(i) * bins + j];
      const double v = joint[static_cast<std::size_t>(j) * bins + i];
      hab -= xlogx(u) + xlogx(v);
    }
  }

  const double hmax = std::max(ha, hb);
  if (hmax <= 0.0) return 0.0;
  const double mi = ha + hb - hab;
  return std::max(0.0, mi / hmax);
}

double rmse(const Array3<double>& a, const Array3<double>& b) {
  if (a.size() != b.size() || a.size() == 0)
    throw std::invalid_argument("rmse: size mismatch");
  double acc = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    const double d = a[n] - b[n];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

}  // namespace regseg

#pragma once

// Privacy scores (PSNR, perceptual-distance proxy) and utility (accuracy).
//
// Signed (InstaHide-range) images are scored through abs(image): the attack
// side nullifies the sign flips, so that is the image it actually sees.
//
// The perceptual proxy follows the LPIPS recipe without learned channel
// weights: for each selected layer, unit-normalize the activation vector
// across channels at every spatial position, take the squared L2 distance
// per position, average over positions; then average over layers.
//
// Pair report CSV (fixed columns):
//   defense,attack,sample_id,psnr_db,proxy
// followed by footer rows whose sample_id is one of avg, std, max_psnr,
// min_proxy (std is the sample standard deviation).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "loda/image.hpp"
#include "loda/nn.hpp"

namespace loda::metrics {

using json = nlohmann::json;

inline constexpr double kPsnrCap = 200.0;

namespace detail {

inline const Tensor& unit_pixels(const Image& img, Tensor& scratch) {
  if (img.range() == PixelRange::Unit) return img.pixels();
  scratch = img.magnitude().pixels();
  return scratch;
}

}  // namespace detail

// 10 log10(1 / MSE); MSE below 1e-20 returns the 200 dB cap.
inline double psnr(const Image& a, const Image& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor sa, sb;
  const Tensor& x = detail::unit_pixels(a, sa);
  const Tensor& y = detail::unit_pixels(b, sb);
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
  mse /= static_cast<double>(x.size());
  if (mse < 1e-20) return kPsnrCap;
  return 10.0 * std::log10(1.0 / mse);
}

inline double perceptual_distance(const Image& a, const Image& b, const nn::FeatureExtractor& fx) {
  if (a.shape() != b.shape()) throw ShapeError("perceptual_distance: shape mismatch");
  const Image ua = a.range() == PixelRange::Unit ? a : a.magnitude();
  const Image ub = b.range() == PixelRange::Unit ? b : b.magnitude();
  const auto fa = nn::layer_features(fx, ua), fb = nn::layer_features(fx, ub);
  constexpr double eps = 1e-10;
  double total = 0.0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const std::size_t c = fa[l].dim(0), hw = fa[l].size() / c;
    double layer = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      double na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        na += fa[l][k * hw + p] * fa[l][k * hw + p];
        nb += fb[l][k * hw + p] * fb[l][k * hw + p];
      }
      na = std::sqrt(na) + eps;
      nb = std::sqrt(nb) + eps;
      double d = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double diff = fa[l][k * hw + p] / na - fb[l][k * hw + p] / nb;
        d += diff * diff;
      }
      layer += d;
    }
    total += layer / static_cast<double>(hw);
  }
  return total / static_cast<double>(fa.size());
}

// Argmax predictions for a batch of images, lowest index on ties.
inline std::vector<std::size_t> predict_classes(const nn::Model& m, const std::vector<LabeledExample>& data,
                                                std::size_t chunk = 64) {
  std::vector<std::size_t> out;
  const std::size_t d = shape_numel(m.spec.input);
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    const std::size_t n = std::min(chunk, data.size() - s);
    Shape bs{n};
    bs.insert(bs.end(), m.spec.input.begin(), m.spec.input.end());
    Tensor batch(bs);
    for (std::size_t i = 0; i < n; ++i) {
      nn::check_input(m, data[s + i].image);
      const Image& img = data[s + i].image;
      std::copy(img.pixels().data().begin(), img.pixels().data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const Tensor z = nn::logits(m, batch);
    const std::size_t k = z.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (z[i * k + j] > z[i * k + best]) best = j;
      out.push_back(best);
    }
  }
  return out;
}

// Fraction of argmax-correct predictions; soft labels are scored by their argmax.
inline double accuracy(const nn::Model& m, const std::vector<LabeledExample>& data) {
  if (data.empty()) throw DomainError("accuracy: empty dataset");
  const auto pred = predict_classes(m, data);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += pred[i] == data[i].label.argmax();
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

// ---- aggregation ----------------------------------------------------------

struct PairScore {
  std::uint64_t sample_id = 0;
  double psnr = 0.0;
  double proxy = 0.0;
};

struct PrivacyReport {
  std::vector<PairScore> pairs;
  double psnr_avg = 0.0, psnr_std = 0.0, psnr_max = 0.0;
  double proxy_avg = 0.0, proxy_std = 0.0, proxy_min = 0.0;
};

namespace detail {

// Mean and sample std computed on sorted values, so the result does not
// depend on pair order.
inline std::pair<double, double> mean_std(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

inline PrivacyReport summarize(std::vector<PairScore> pairs) {
  if (pairs.empty()) throw DomainError("summarize: no pairs");
  PrivacyReport r;
  std::vector<double> ps, px;
  for (const auto& p : pairs) {
    ps.push_back(p.psnr);
    px.push_back(p.proxy);
  }
  std::tie(r.psnr_avg, r.psnr_std) = detail::mean_std(ps);
  std::tie(r.proxy_avg, r.proxy_std) = detail::mean_std(px);
  r.psnr_max = *std::max_element(ps.begin(), ps.end());
  r.proxy_min = *std::min_element(px.begin(), px.end());
  r.pairs = std::move(pairs);
  return r;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string report_csv(const PrivacyReport& r, const std::string& defense, const std::string& attack) {
  std::ostringstream os;
  os << "defense,attack,sample_id,psnr_db,proxy\n";
  const std::string pre = defense + "," + attack + ",";
  for (const auto& p : r.pairs) os << pre << p.sample_id << ',' << fmt(p.psnr) << ',' << fmt(p.proxy) << '\n';
  os << pre << "avg," << fmt(r.psnr_avg) << ',' << fmt(r.proxy_avg) << '\n';
  os << pre << "std," << fmt(r.psnr_std) << ',' << fmt(r.proxy_std) << '\n';
  os << pre << "max_psnr," << fmt(r.psnr_max) << ",\n";
  os << pre << "min_proxy,," << fmt(r.proxy_min) << '\n';
  return os.str();
}

inline json report_json(const PrivacyReport& r) {
  return {{"n", r.pairs.size()},         {"psnr_avg", r.psnr_avg},   {"psnr_std", r.psnr_std},
          {"psnr_max", r.psnr_max},      {"proxy_avg", r.proxy_avg}, {"proxy_std", r.proxy_std},
          {"proxy_min", r.proxy_min}};
}

// Which private image an encrypted/reconstructed image is scored against.
// LargestComponent follows the Mixup evaluation: the member with the largest
// mixing weight (the own image, by construction of the sampler).
enum class Pairing { Original, LargestComponent };

}  // namespace loda::metrics

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "loda/tensor.hpp"

namespace loda {

// Unit: ordinary images in [0,1]. Signed: sign-flipped encodings in [-1,1];
// the range is declared rather than clamped so the signs survive.
enum class PixelRange { Unit, Signed };

inline const char* range_name(PixelRange r) { return r == PixelRange::Unit ? "unit" : "signed"; }

// channels x height x width pixel grid.
class Image {
 public:
  Image() = default;

  explicit Image(Tensor pixels, PixelRange range = PixelRange::Unit)
      : pixels_(std::move(pixels)), range_(range) {
    if (pixels_.rank() != 3) throw ShapeError("image: expected [C,H,W], got " + shape_str(pixels_.shape()));
    const double lo = range_ == PixelRange::Unit ? 0.0 : -1.0;
    for (double v : pixels_.data())
      if (!(v >= lo && v <= 1.0))
        throw DomainError("image: pixel " + std::to_string(v) + " outside the " + range_name(range_) + " range");
  }

  static Image filled(std::size_t c, std::size_t h, std::size_t w, double v) {
    return Image(Tensor({c, h, w}, v));
  }

  const Tensor& pixels() const noexcept { return pixels_; }
  PixelRange range() const noexcept { return range_; }
  const Shape& shape() const noexcept { return pixels_.shape(); }
  std::size_t channels() const { return pixels_.dim(0); }
  std::size_t height() const { return pixels_.dim(1); }
  std::size_t width() const { return pixels_.dim(2); }
  std::size_t size() const noexcept { return pixels_.size(); }

  // [1,C,H,W] batch of one, for model input.
  Tensor batched() const {
    Shape s{1};
    s.insert(s.end(), pixels_.shape().begin(), pixels_.shape().end());
    return pixels_.reshaped(std::move(s));
  }

  // Elementwise |x|, which maps a signed encoding back into [0,1].
  Image magnitude() const {
    Tensor t = pixels_;
    for (auto& v : t.data()) v = std::fabs(v);
    return Image(std::move(t), PixelRange::Unit);
  }

  friend bool operator==(const Image& a, const Image& b) {
    return a.range_ == b.range_ && a.pixels_ == b.pixels_;
  }

 private:
  Tensor pixels_;
  PixelRange range_ = PixelRange::Unit;
};

// Class distribution. Hard labels are one-hot.
class Label {
 public:
  Label() = default;

  explicit Label(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw DomainError("label: empty distribution");
    double s = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0)) throw DomainError("label: negative probability");
      s += p;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw DomainError("label: probabilities sum to " + std::to_string(s));
  }

  static Label hard(std::size_t cls, std::size_t num_classes) {
    if (cls >= num_classes)
      throw DomainError("label: class " + std::to_string(cls) + " out of range for " +
                        std::to_string(num_classes) + " classes");
    std::vector<double> p(num_classes, 0.0);
    p[cls] = 1.0;
    return Label(std::move(p));
  }

  const std::vector<double>& probs() const noexcept { return probs_; }
  std::size_t num_classes() const noexcept { return probs_.size(); }

  bool is_hard() const {
    return std::count(probs_.begin(), probs_.end(), 1.0) == 1 &&
           std::count(probs_.begin(), probs_.end(), 0.0) == static_cast<std::ptrdiff_t>(probs_.size() - 1);
  }

  // Lowest index among maximal entries.
  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
  }

  friend bool operator==(const Label&, const Label&) = default;

 private:
  std::vector<double> probs_;
};

struct LabeledExample {
  std::uint64_t id = 0;
  Image image;
  Label label;
};

}  // namespace loda

#pragma once

// Dataset ingestion (IDX, directory of PNGs, CSV), split manifests, the
// bundled synthetic shapes corpus and PNG grid output.
//
// CSV: one sample per line, "label,p_1,...,p_d" in C,H,W order. A file whose
// pixel tokens are all integers is read as bytes (v/255); any token with a
// '.', 'e' or 'E' switches the whole file to reals in [0,1].
// Manifest JSON: {"seed": u64, "splits": {"private-train": [ids],
//   "private-eval": [ids], "public-pool": [ids], "test": [ids]}}; sample ids
// are 0-based row indices in the source.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "loda/digest.hpp"
#include "loda/image.hpp"
#include "loda/rng.hpp"

namespace loda::data {

using json = nlohmann::json;

inline const std::array<std::string, 4> kSplitNames = {"private-train", "private-eval", "public-pool", "test"};

struct DatasetSplit {
  std::vector<LabeledExample> private_train;
  std::vector<LabeledExample> private_eval;
  std::vector<LabeledExample> public_pool;
  std::vector<LabeledExample> test;

  std::vector<LabeledExample>& by_name(const std::string& n) {
    if (n == "private-train") return private_train;
    if (n == "private-eval") return private_eval;
    if (n == "public-pool") return public_pool;
    if (n == "test") return test;
    throw ConfigError("unknown split '" + n + "'");
  }
};

struct Manifest {
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<std::uint64_t>> splits;
};

inline json manifest_to_json(const Manifest& m) {
  json j;
  j["seed"] = m.seed;
  j["splits"] = json::object();
  for (const auto& name : kSplitNames) j["splits"][name] = m.splits.count(name) ? m.splits.at(name) : std::vector<std::uint64_t>{};
  return j;
}

inline void validate_manifest(const Manifest& m, std::size_t sample_count) {
  std::set<std::uint64_t> seen;
  for (const auto& [name, ids] : m.splits) {
    if (std::find(kSplitNames.begin(), kSplitNames.end(), name) == kSplitNames.end())
      throw ParseError("manifest: unknown split '" + name + "'");
    for (auto id : ids) {
      if (id >= sample_count)
        throw ParseError("manifest: sample id " + std::to_string(id) + " in '" + name + "' out of range");
      if (!seen.insert(id).second)
        throw ParseError("manifest: overlapping splits, sample id " + std::to_string(id) + " appears twice");
    }
  }
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  try {
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [name, ids] : j.at("splits").items()) m.splits[name] = ids.get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline Manifest load_manifest(const std::string& path) {
  try {
    return manifest_from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ParseError("manifest " + path + ": " + e.what());
  }
}

struct SplitSizes {
  std::size_t private_train = 0, private_eval = 0, public_pool = 0, test = 0;
};

// Deterministic split assignment: a pure function of (labels, sizes, seed).
// The public pool is drawn with class weights skew^class (skew = 1 gives a
// uniform draw), mimicking a public set whose class mix differs from the
// private one. The remaining ids fill private-train, private-eval, test.
inline Manifest make_manifest(const std::vector<std::size_t>& labels, SplitSizes sizes, std::uint64_t seed,
                              double public_skew = 1.0) {
  const std::size_t total = sizes.private_train + sizes.private_eval + sizes.public_pool + sizes.test;
  if (total > labels.size())
    throw ConfigError("manifest: requested " + std::to_string(total) + " samples from " +
                      std::to_string(labels.size()));
  Rng rng(seed);
  std::vector<std::uint64_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  Manifest m;
  m.seed = seed;
  std::vector<bool> taken(labels.size(), false);
  auto& pub = m.splits["public-pool"];
  // weighted sampling without replacement via exponential keys
  std::vector<std::pair<double, std::uint64_t>> keys;
  for (auto id : order) {
    const double w = std::pow(public_skew, static_cast<double>(labels[id]));
    keys.emplace_back(rng.exponential() / w, id);
  }
  std::stable_sort(keys.begin(), keys.end(), [](auto& a, auto& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < sizes.public_pool; ++i) {
    pub.push_back(keys[i].second);
    taken[keys[i].second] = true;
  }
  std::sort(pub.begin(), pub.end());
  std::size_t cursor = 0;
  auto fill = [&](const std::string& name, std::size_t n) {
    auto& ids = m.splits[name];
    while (ids.size() < n) {
      const auto id = order[cursor++];
      if (!taken[id]) {
        ids.push_back(id);
        taken[id] = true;
      }
    }
    std::sort(ids.begin(), ids.end());
  };
  fill("private-train", sizes.private_train);
  fill("private-eval", sizes.private_eval);
  fill("test", sizes.test);
  return m;
}

inline DatasetSplit apply_manifest(const std::vector<LabeledExample>& samples, const Manifest& m) {
  validate_manifest(m, samples.size());
  DatasetSplit split;
  for (const auto& [name, ids] : m.splits)
    for (auto id : ids) split.by_name(name).push_back(samples[id]);
  return split;
}

// ---- source formats -------------------------------------------------------

enum class Format { Idx, PngDir, Csv };

inline Format parse_format(const std::string& s) {
  if (s == "idx") return Format::Idx;
  if (s == "png-dir") return Format::PngDir;
  if (s == "csv") return Format::Csv;
  throw ConfigError("unknown dataset format '" + s + "'");
}

struct Source {
  Format format = Format::Csv;
  std::string path;         // csv file, idx image file, or png directory
  std::string labels_path;  // idx only
  Shape image_shape;        // [C,H,W]; required for csv, checked otherwise
  std::size_t num_classes = 10;
};

inline Label checked_label(long long v, std::size_t num_classes, const std::string& where) {
  if (v < 0 || static_cast<std::size_t>(v) >= num_classes)
    throw ParseError(where + ": label " + std::to_string(v) + " out of range [0," + std::to_string(num_classes) + ")");
  return Label::hard(static_cast<std::size_t>(v), num_classes);
}

inline std::vector<LabeledExample> load_csv(const Source& src) {
  if (src.image_shape.size() != 3) throw ConfigError("csv: image shape [C,H,W] required");
  std::ifstream in(src.path);
  if (!in) throw IoError("cannot open " + src.path);
  const std::size_t d = shape_numel(src.image_shape);
  std::vector<std::pair<long long, std::vector<std::string>>> rows;
  bool real_mode = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> tok;
    std::stringstream ss(line);
    std::string t;
    while (std::getline(ss, t, ',')) tok.push_back(t);
    if (tok.size() != d + 1)
      throw ParseError("csv line " + std::to_string(lineno) + ": expected " + std::to_string(d + 1) +
                       " fields, got " + std::to_string(tok.size()));
    long long label;
    try {
      label = std::stoll(tok[0]);
    } catch (...) {
      throw ParseError("csv line " + std::to_string(lineno) + ": bad label '" + tok[0] + "'");
    }
    for (std::size_t i = 1; i < tok.size(); ++i)
      if (tok[i].find_first_of(".eE") != std::string::npos) real_mode = true;
    tok.erase(tok.begin());
    rows.emplace_back(label, std::move(tok));
  }
  std::vector<LabeledExample> out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::string where = "csv row " + std::to_string(r);
    Tensor px(src.image_shape);
    for (std::size_t i = 0; i < d; ++i) {
      double v;
      try {
        v = std::stod(rows[r].second[i]);
      } catch (...) {
        throw ParseError(where + ": bad pixel '" + rows[r].second[i] + "'");
      }
      if (!real_mode) {
        if (v < 0 || v > 255 || v != std::floor(v)) throw ParseError(where + ": pixel byte out of range");
        v /= 255.0;
      } else if (!(v >= 0.0 && v <= 1.0)) {
        throw ParseError(where + ": pixel " + rows[r].second[i] + " outside [0,1]");
      }
      px[i] = v;
    }
    out.push_back({r, Image(std::move(px)), checked_label(rows[r].first, src.num_classes, where)});
  }
  return out;
}

inline void write_csv(const std::string& path, const std::vector<LabeledExample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& s : samples) {
    out << s.label.argmax();
    for (double v : s.image.pixels().data()) out << ',' << static_cast<int>(std::floor(v * 255.0 + 0.5));
    out << '\n';
  }
}

namespace detail {

inline std::uint32_t be32(std::string_view b, std::size_t off, const std::string& file) {
  if (off + 4 > b.size()) throw ParseError("idx " + file + ": truncated header at offset " + std::to_string(off));
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 3]));
}

struct IdxArray {
  std::vector<std::size_t> dims;
  std::string_view payload;
};

// Unsigned-byte IDX: magic 0x00 0x00 0x08 <ndim>, then ndim big-endian u32 extents.
inline IdxArray parse_idx(std::string_view b, const std::string& file) {
  const std::uint32_t magic = be32(b, 0, file);
  if ((magic & 0xffffff00u) != 0x00000800u) {
    std::ostringstream os;
    os << "idx " << file << ": bad magic 0x" << std::hex << magic << " at offset 0";
    throw ParseError(os.str());
  }
  IdxArray a;
  const std::size_t nd = magic & 0xffu;
  std::size_t count = 1;
  for (std::size_t i = 0; i < nd; ++i) {
    a.dims.push_back(be32(b, 4 + 4 * i, file));
    count *= a.dims.back();
  }
  const std::size_t off = 4 + 4 * nd;
  if (b.size() - off != count)
    throw ParseError("idx " + file + ": payload at offset " + std::to_string(off) + " holds " +
                     std::to_string(b.size() - off) + " bytes, header declares " + std::to_string(count));
  a.payload = b.substr(off);
  return a;
}

}  // namespace detail

inline std::vector<LabeledExample> load_idx(const Source& src) {
  const std::string ib = read_file(src.path), lb = read_file(src.labels_path);
  const auto images = detail::parse_idx(ib, src.path);
  const auto labels = detail::parse_idx(lb, src.labels_path);
  if (images.dims.size() != 3 && images.dims.size() != 4)
    throw ParseError("idx " + src.path + ": expected 3 or 4 dimensions");
  if (labels.dims.size() != 1 || labels.dims[0] != images.dims[0])
    throw ParseError("idx " + src.labels_path + ": label count does not match image count");
  Shape shape = images.dims.size() == 3 ? Shape{1, images.dims[1], images.dims[2]}
                                        : Shape{images.dims[1], images.dims[2], images.dims[3]};
  if (!src.image_shape.empty() && src.image_shape != shape)
    throw ParseError("idx " + src.path + ": image shape " + shape_str(shape) + " does not match configured " +
                     shape_str(src.image_shape));
  const std::size_t d = shape_numel(shape);
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < images.dims[0]; ++i) {
    Tensor px(shape);
    for (std::size_t k = 0; k < d; ++k) px[k] = static_cast<unsigned char>(images.payload[i * d + k]) / 255.0;
    out.push_back({i, Image(std::move(px)),
                   checked_label(static_cast<unsigned char>(labels.payload[i]), src.num_classes,
                                 "idx label " + std::to_string(i))});
  }
  return out;
}

inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const std::vector<LabeledExample>& samples) {
  if (samples.empty()) throw DomainError("write_idx: no samples");
  const Shape& s = samples[0].image.shape();
  auto put32 = [](std::string& o, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) o.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  std::string ib, lb;
  const bool gray = s[0] == 1;
  put32(ib, 0x00000800u | (gray ? 3u : 4u));
  put32(ib, static_cast<std::uint32_t>(samples.size()));
  if (!gray) put32(ib, static_cast<std::uint32_t>(s[0]));
  put32(ib, static_cast<std::uint32_t>(s[1]));
  put32(ib, static_cast<std::uint32_t>(s[2]));
  put32(lb, 0x00000801u);
  put32(lb, static_cast<std::uint32_t>(samples.size()));
  for (const auto& e : samples) {
    for (double v : e.image.pixels().data()) ib.push_back(static_cast<char>(static_cast<unsigned>(std::floor(v * 255.0 + 0.5))));
    lb.push_back(static_cast<char>(e.label.argmax()));
  }
  write_file(images_path, ib);
  write_file(labels_path, lb);
}

// ---- PNG ------------------------------------------------------------------

// Round half up: 0.5 -> 128.
inline unsigned char quantize(double v) { return static_cast<unsigned char>(std::floor(v * 255.0 + 0.5)); }

inline Image load_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("png " + path + ": " + img.message);
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t c = gray ? 1 : 3;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("png " + path + ": " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  Tensor px({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) px[(k * h + y) * w + x] = buf[(y * w + x) * c + k] / 255.0;
  return Image(std::move(px));
}

inline void save_png(const std::string& path, const Tensor& chw) {
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (c != 1 && c != 3) throw ShapeError("png: need 1 or 3 channels, got " + std::to_string(c));
  std::vector<unsigned char> buf(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) buf[(y * w + x) * c + k] = quantize(chw[(k * h + y) * w + x]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("png " + path + ": " + img.message);
}

struct GridLayout {
  std::size_t cols = 0, rows = 0;
};

inline GridLayout grid_layout(std::size_t n) {
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  return {cols, (n + cols - 1) / cols};
}

// Tiles images row-major into a ceil(sqrt(n))-wide grid, no gutters; unused
// tiles are black. Pixels are quantized to 8 bits with round-half-up.
inline void save_image_grid(const std::vector<Image>& images, const std::string& path) {
  if (images.empty()) throw DomainError("save_image_grid: empty image list");
  const Shape s = images[0].shape();
  for (const auto& im : images) {
    if (im.shape() != s) throw ShapeError("save_image_grid: images differ in shape");
    if (im.range() != PixelRange::Unit) throw DomainError("save_image_grid: signed image; pass magnitude()");
  }
  const auto [cols, rows] = grid_layout(images.size());
  const std::size_t c = s[0], h = s[1], w = s[2];
  Tensor grid({c, rows * h, cols * w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t r0 = (i / cols) * h, c0 = (i % cols) * w;
    const Tensor& px = images[i].pixels();
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          grid[(k * rows * h + r0 + y) * cols * w + c0 + x] = px[(k * h + y) * w + x];
  }
  save_png(path, grid);
}

// png-dir: <dir>/labels.csv with lines "file.png,label"; ids follow line order.
inline std::vector<LabeledExample> load_png_dir(const Source& src) {
  const std::string listing = (std::filesystem::path(src.path) / "labels.csv").string();
  std::ifstream in(listing);
  if (!in) throw IoError("cannot open " + listing);
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(listing + " line " + std::to_string(lineno) + ": expected file,label");
    long long label;
    try {
      label = std::stoll(line.substr(comma + 1));
    } catch (...) {
      throw ParseError(listing + " line " + std::to_string(lineno) + ": bad label");
    }
    Image im = load_png((std::filesystem::path(src.path) / line.substr(0, comma)).string());
    if (!src.image_shape.empty() && im.shape() != src.image_shape)
      throw ParseError(listing + " line " + std::to_string(lineno) + ": image shape " + shape_str(im.shape()) +
                       " does not match configured " + shape_str(src.image_shape));
    const std::uint64_t id = out.size();
    out.push_back({id, std::move(im), checked_label(label, src.num_classes, listing + " line " + std::to_string(lineno))});
  }
  return out;
}

inline std::vector<LabeledExample> load_samples(const Source& src) {
  switch (src.format) {
    case Format::Csv:
      return load_csv(src);
    case Format::Idx:
      return load_idx(src);
    case Format::PngDir:
      return load_png_dir(src);
  }
  return {};
}

inline DatasetSplit load_dataset(const Source& src, const Manifest& manifest) {
  return apply_manifest(load_samples(src), manifest);
}

inline DatasetSplit load_dataset(const Source& src, const std::string& manifest_path) {
  return load_dataset(src, load_manifest(manifest_path));
}

// ---- synthetic shapes corpus ---------------------------------------------

inline const std::array<std::string, 10> kShapeClasses = {
    "filled-square", "hollow-square", "disc",         "ring",          "triangle",
    "plus",          "diagonal-cross", "h-stripes",   "v-stripes",     "diamond"};

namespace detail {

// Coverage test for class `cls` at point (u, v) in shape-local coordinates
// ([-1,1]^2 is the shape's bounding box).
inline bool shape_covers(std::size_t cls, double u, double v) {
  const double au = std::fabs(u), av = std::fabs(v), r = std::sqrt(u * u + v * v);
  switch (cls) {
    case 0: return au <= 1 && av <= 1;
    case 1: return au <= 1 && av <= 1 && (au >= 0.55 || av >= 0.55);
    case 2: return r <= 1;
    case 3: return r <= 1 && r >= 0.55;
    case 4: return v <= 1 && v >= -1 && au <= (v + 1) / 2;
    case 5: return (au <= 0.3 && av <= 1) || (av <= 0.3 && au <= 1);
    case 6: return au <= 1 && av <= 1 && (std::fabs(u - v) <= 0.42 || std::fabs(u + v) <= 0.42);
    case 7: return au <= 1 && av <= 1 && std::fmod(v + 1.0, 0.8) < 0.4;
    case 8: return au <= 1 && av <= 1 && std::fmod(u + 1.0, 0.8) < 0.4;
    case 9: return au + av <= 1;
  }
  return false;
}

}  // namespace detail

struct SyntheticConfig {
  std::size_t count = 2000;
  std::size_t height = 16, width = 16, channels = 1;
  std::uint64_t seed = 1;
  double noise = 0.03;
};

// Procedural 10-class shapes: random centre, size, intensities and noise,
// rendered with 4x4 supersampling and quantized to 8 bits. Labels cycle
// through the classes so any prefix is near-balanced.
inline std::vector<LabeledExample> synthetic_shapes(const SyntheticConfig& cfg) {
  std::vector<LabeledExample> out;
  out.reserve(cfg.count);
  const std::size_t h = cfg.height, w = cfg.width, c = cfg.channels;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng(derive_seed(cfg.seed, i));
    const std::size_t cls = i % kShapeClasses.size();
    const double half = rng.uniform(0.26, 0.42) * static_cast<double>(std::min(h, w));
    const double cy = rng.uniform(half, static_cast<double>(h) - half);
    const double cx = rng.uniform(half, static_cast<double>(w) - half);
    const double fg = rng.uniform(0.6, 1.0), bg = rng.uniform(0.0, 0.3);
    std::vector<double> tint(c, 1.0);
    if (c > 1)
      for (auto& t : tint) t = rng.uniform(0.5, 1.0);
    Tensor px({c, h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) {
            const double py = static_cast<double>(y) + (sy + 0.5) / 4.0, pxx = static_cast<double>(x) + (sx + 0.5) / 4.0;
            hits += detail::shape_covers(cls, (pxx - cx) / half, (py - cy) / half);
          }
        const double cover = hits / 16.0;
        for (std::size_t k = 0; k < c; ++k) {
          double v = bg + cover * (fg * tint[k] - bg) + cfg.noise * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          px[(k * h + y) * w + x] = quantize(v) / 255.0;
        }
      }
    out.push_back({i, Image(std::move(px)), Label::hard(cls, kShapeClasses.size())});
  }
  return out;
}

inline std::vector<std::size_t> hard_labels(const std::vector<LabeledExample>& s) {
  std::vector<std::size_t> out;
  for (const auto& e : s) out.push_back(e.label.argmax());
  return out;
}

}  // namespace loda::data

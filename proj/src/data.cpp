#include "manpp/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "manpp/errors.hpp"

namespace manpp {

// ---- Dataset --------------------------------------------------------------

Shape Dataset::batch_shape(std::size_t n) const {
  Shape s{n};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return s;
}

Tensor Dataset::batch(std::span<const std::size_t> idx, std::vector<int>& labels_out) const {
  const auto d = sample_size();
  std::vector<double> buf(idx.size() * d);
  labels_out.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= size()) throw InputError("batch index out of range");
    std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                buf.begin() + static_cast<std::ptrdiff_t>(r * d));
    labels_out[r] = labels[idx[r]];
  }
  return Tensor(batch_shape(idx.size()), std::move(buf));
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw InputError("dataset slice out of range");
  Dataset out;
  out.sample_shape = sample_shape;
  out.classes = classes;
  const auto d = sample_size();
  out.features.assign(features.begin() + static_cast<std::ptrdiff_t>(begin * d),
                      features.begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return out;
}

void Dataset::validate() const {
  if (features.size() != size() * sample_size()) throw InputError("dataset feature/label count mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw InputError("label " + std::to_string(labels[i]) + " of record " + std::to_string(i) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
  }
  if (!std::all_of(features.begin(), features.end(), [](double v) { return std::isfinite(v); })) {
    throw InputError("dataset contains non-finite features");
  }
}

// ---- IDX ------------------------------------------------------------------

namespace {

struct IdxFile {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

IdxFile read_idx(const std::filesystem::path& path, std::initializer_list<std::uint32_t> magics,
                 std::size_t limit) {
  const auto bytes = read_all(path);
  const auto name = path.string();
  if (bytes.size() < 4) {
    throw FormatError(name + ": truncated header at byte offset " + std::to_string(bytes.size()) +
                      ": expected 4 magic bytes");
  }
  const auto magic = be32(bytes, 0);
  if (std::find(magics.begin(), magics.end(), magic) == magics.end()) {
    std::ostringstream os;
    os << name << ": bad magic 0x" << std::hex << magic << " at byte offset 0";
    throw FormatError(os.str());
  }
  const std::size_t ndims = magic & 0xFF;
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) {
    throw FormatError(name + ": truncated header at byte offset " + std::to_string(bytes.size()) + ": expected " +
                      std::to_string(header) + " header bytes");
  }
  IdxFile f;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    const auto d = be32(bytes, 4 + 4 * i);
    if (d == 0) throw FormatError(name + ": zero extent at byte offset " + std::to_string(4 + 4 * i));
    f.dims.push_back(d);
    total *= d;
  }
  const std::size_t available = bytes.size() - header;
  if (available < total) {
    throw FormatError(name + ": truncated payload at byte offset " + std::to_string(header) + ": expected " +
                      std::to_string(total) + " bytes, got " + std::to_string(available));
  }
  std::size_t keep = total;
  if (limit != 0 && limit < f.dims[0]) {
    keep = total / f.dims[0] * limit;
    f.dims[0] = limit;
  }
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                   bytes.begin() + static_cast<std::ptrdiff_t>(header + keep));
  return f;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

Tensor parse_idx_images(const std::filesystem::path& path, std::size_t limit) {
  auto f = read_idx(path, {0x00000803u, 0x00000804u}, limit);
  Shape shape = f.dims.size() == 3 ? Shape{f.dims[0], 1, f.dims[1], f.dims[2]}
                                   : Shape{f.dims[0], f.dims[1], f.dims[2], f.dims[3]};
  std::vector<double> data(f.payload.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(f.payload[i]) / 255.0;
  return Tensor(std::move(shape), std::move(data));
}

std::vector<int> parse_idx_labels(const std::filesystem::path& path, std::size_t limit) {
  auto f = read_idx(path, {0x00000801u}, limit);
  return {f.payload.begin(), f.payload.end()};
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t limit) {
  const auto x = parse_idx_images(images, limit);
  auto y = parse_idx_labels(labels, limit);
  if (y.size() != x.dim(0)) {
    throw FormatError("IDX record counts differ: " + std::to_string(x.dim(0)) + " images vs " +
                      std::to_string(y.size()) + " labels");
  }
  Dataset d;
  d.sample_shape = Shape(x.shape().begin() + 1, x.shape().end());
  d.features.assign(x.data().begin(), x.data().end());
  d.classes = static_cast<std::size_t>(*std::max_element(y.begin(), y.end())) + 1;
  d.classes = std::max<std::size_t>(d.classes, 2);
  d.labels = std::move(y);
  return d;
}

void write_idx_images(const std::filesystem::path& path, std::size_t n, std::size_t h, std::size_t w,
                      std::span<const std::uint8_t> pixels) {
  if (pixels.size() != n * h * w) throw InputError("write_idx_images: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  put_be32(out, 0x00000803u);
  put_be32(out, static_cast<std::uint32_t>(n));
  put_be32(out, static_cast<std::uint32_t>(h));
  put_be32(out, static_cast<std::uint32_t>(w));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  put_be32(out, 0x00000801u);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw InputError("IDX labels must fit in one byte");
    out.put(static_cast<char>(l));
  }
}

// ---- CSV ------------------------------------------------------------------

Dataset parse_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "label") {
    throw FormatError(path.string() + ": header must be `label,f0,f1,...`");
  }
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i] != "f" + std::to_string(i - 1)) {
      throw FormatError(path.string() + ": header column " + std::to_string(i) + " should be f" +
                        std::to_string(i - 1));
    }
  }
  const std::size_t d = header.size() - 1;
  Dataset ds;
  ds.sample_shape = {d};
  std::size_t row = 1;
  int max_label = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                        " cells, expected " + std::to_string(header.size()));
    }
    try {
      std::size_t used = 0;
      const int label = std::stoi(cells[0], &used);
      if (label < 0) throw FormatError(path.string() + ": negative label on row " + std::to_string(row));
      ds.labels.push_back(label);
      max_label = std::max(max_label, label);
      for (std::size_t i = 1; i < cells.size(); ++i) ds.features.push_back(std::stod(cells[i]));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": unparsable value on row " + std::to_string(row));
    }
  }
  if (ds.labels.empty()) throw FormatError(path.string() + ": no records");
  ds.classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  ds.validate();
  return ds;
}

// ---- blobs ----------------------------------------------------------------

namespace {

std::vector<std::vector<double>> draw_centers(const BlobSpec& spec, Rng& rng) {
  if (spec.classes < 2 || spec.dim < 1) throw ConfigError("blobs need classes >= 2 and dim >= 1");
  if (!(spec.noise >= 0.0)) throw ConfigError("blob noise must be >= 0");
  const double min_sep = 4.0 * spec.noise;
  const double half = std::max(1.0, min_sep * static_cast<double>(spec.classes));
  std::uniform_real_distribution<double> uni(-half, half);
  std::vector<std::vector<double>> centers;
  while (centers.size() < spec.classes) {
    std::vector<double> c(spec.dim);
    for (auto& v : c) v = uni(rng);
    const bool ok = std::all_of(centers.begin(), centers.end(), [&](const std::vector<double>& o) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < spec.dim; ++k) d2 += (c[k] - o[k]) * (c[k] - o[k]);
      return std::sqrt(d2) >= min_sep && d2 > 0.0;
    });
    if (ok) centers.push_back(std::move(c));
  }
  return centers;
}

Dataset sample_blobs(const BlobSpec& spec, const std::vector<std::vector<double>>& centers, std::size_t n,
                     Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset ds;
  ds.sample_shape = {spec.dim};
  ds.classes = spec.classes;
  ds.features.reserve(n * spec.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<int>(i % spec.classes);
    ds.labels.push_back(label);
    for (std::size_t k = 0; k < spec.dim; ++k) {
      ds.features.push_back(centers[static_cast<std::size_t>(label)][k] + spec.noise * gauss(rng));
    }
  }
  return ds;
}

}  // namespace

Dataset gen_blobs(const BlobSpec& spec, Rng& rng) {
  const auto centers = draw_centers(spec, rng);
  return sample_blobs(spec, centers, spec.n, rng);
}

std::pair<Dataset, Dataset> gen_blobs_split(const BlobSpec& spec, std::size_t n_test, Rng& rng) {
  const auto centers = draw_centers(spec, rng);
  auto train = sample_blobs(spec, centers, spec.n, rng);
  auto test = sample_blobs(spec, centers, n_test, rng);
  return {std::move(train), std::move(test)};
}

// ---- synthetic digits -----------------------------------------------------

namespace {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

std::vector<Stroke> ellipse(double cx, double cy, double rx, double ry, int segments = 14) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double t = 2.0 * std::numbers::pi * i / segments;
    s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return {s};
}

const std::array<std::vector<Stroke>, 10>& glyphs() {
  static const std::array<std::vector<Stroke>, 10> g = [] {
    std::array<std::vector<Stroke>, 10> d;
    d[0] = ellipse(0.5, 0.5, 0.26, 0.38);
    d[1] = {{{0.38, 0.25}, {0.55, 0.1}, {0.55, 0.9}}};
    d[2] = {{{0.25, 0.3}, {0.35, 0.13}, {0.55, 0.1}, {0.72, 0.2}, {0.72, 0.38}, {0.25, 0.9}, {0.78, 0.9}}};
    d[3] = {{{0.25, 0.15}, {0.7, 0.15}, {0.45, 0.45}, {0.7, 0.6}, {0.72, 0.8}, {0.5, 0.92}, {0.25, 0.85}}};
    d[4] = {{{0.62, 0.9}, {0.62, 0.1}, {0.2, 0.65}, {0.8, 0.65}}};
    d[5] = {{{0.75, 0.1}, {0.32, 0.1}, {0.28, 0.45}, {0.6, 0.42}, {0.75, 0.6}, {0.7, 0.85}, {0.45, 0.92},
             {0.25, 0.85}}};
    d[6] = {{{0.7, 0.12}, {0.45, 0.2}, {0.3, 0.45}, {0.28, 0.7}, {0.4, 0.9}, {0.62, 0.9}, {0.72, 0.72},
             {0.62, 0.52}, {0.4, 0.5}, {0.3, 0.62}}};
    d[7] = {{{0.22, 0.12}, {0.78, 0.12}, {0.45, 0.9}}};
    auto top = ellipse(0.5, 0.3, 0.18, 0.17);
    auto bottom = ellipse(0.5, 0.7, 0.21, 0.2);
    d[8] = {top[0], bottom[0]};
    auto loop = ellipse(0.48, 0.33, 0.2, 0.19);
    d[9] = {loop[0], {{0.68, 0.35}, {0.64, 0.9}}};
    return d;
  }();
  return g;
}

double segment_distance(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0.0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

DigitImages gen_digit_images(std::size_t n, Rng& rng) {
  constexpr std::size_t side = 28;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

  DigitImages out;
  out.n = n;
  out.pixels.resize(n * side * side);
  out.labels.resize(n);
  std::vector<Stroke> strokes;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 10);
    out.labels[i] = label;
    const double angle = range(-0.4, 0.4);
    const double sx = range(0.65, 1.05), sy = range(0.7, 1.05);
    const double shear = range(-0.45, 0.45);
    const double tx = range(-0.12, 0.12), ty = range(-0.1, 0.1);
    const double thick = range(0.035, 0.08);
    const double ca = std::cos(angle), sa = std::sin(angle);

    strokes = glyphs()[static_cast<std::size_t>(label)];
    // A stray pen stroke on some samples.
    if (uni(rng) < 0.5) strokes.push_back({{range(0.0, 1.0), range(0.0, 1.0)}, {range(0.0, 1.0), range(0.0, 1.0)}});
    for (auto& s : strokes)
      for (auto& p : s) {
        double x = p.x - 0.5 + 0.07 * gauss(rng);
        double y = p.y - 0.5 + 0.07 * gauss(rng);
        x = (x + shear * y) * sx;
        y *= sy;
        const double rx = ca * x - sa * y, ry = sa * x + ca * y;
        // 20-pixel glyph box centered in the 28-pixel frame, as in MNIST.
        p = {(rx + 0.5 + tx) * 20.0 + 4.0, (ry + 0.5 + ty) * 20.0 + 4.0};
      }
    const double radius = thick * 20.0;
    std::uint8_t* img = &out.pixels[i * side * side];
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        const Pt px{static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5};
        double d = 1e9;
        for (const auto& s : strokes)
          for (std::size_t k = 0; k + 1 < s.size(); ++k) d = std::min(d, segment_distance(px, s[k], s[k + 1]));
        double v = std::clamp(radius + 0.5 - d, 0.0, 1.0);
        v = std::clamp(v + 0.15 * gauss(rng), 0.0, 1.0);
        img[r * side + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  }
  return out;
}

Dataset to_dataset(const DigitImages& digits) {
  Dataset d;
  d.sample_shape = {1, 28, 28};
  d.classes = 10;
  d.features.resize(digits.pixels.size());
  for (std::size_t i = 0; i < d.features.size(); ++i) d.features[i] = static_cast<double>(digits.pixels[i]) / 255.0;
  d.labels = digits.labels;
  return d;
}

// ---- normalization --------------------------------------------------------

void normalize(Normalization mode, Dataset& train, Dataset* test) {
  if (mode == Normalization::none) return;
  const auto d = train.sample_size();
  const auto n = train.size();
  if (n == 0) throw InputError("cannot standardize an empty dataset");
  std::vector<double> mean(d, 0.0), stdev(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += train.features[i * d + k];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double z = train.features[i * d + k] - mean[k];
      stdev[k] += z * z;
    }
  for (auto& s : stdev) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s < 1e-12) s = 1.0;
  }
  auto apply = [&](Dataset& ds) {
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) ds.features[i * d + k] = (ds.features[i * d + k] - mean[k]) / stdev[k];
  };
  apply(train);
  if (test) apply(*test);
}

}  // namespace manpp

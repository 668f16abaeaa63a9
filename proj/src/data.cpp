#include "dtnet/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dtnet/rng.hpp"

namespace dtnet {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct ClassStyle {
  double w_lo, w_hi;       // width as fraction of min(H, W)
  double aspect_lo, aspect_hi;  // h/w
  float r, g, b;
};

// car, bus, van, other
constexpr ClassStyle kStyles[kSynthClasses] = {
    {0.20, 0.34, 0.55, 0.80, 0.85f, 0.15f, 0.15f},
    {0.36, 0.55, 0.45, 0.70, 0.15f, 0.45f, 0.85f},
    {0.22, 0.40, 0.80, 1.10, 0.15f, 0.75f, 0.25f},
    {0.12, 0.20, 0.70, 1.05, 0.90f, 0.80f, 0.15f},
};

float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

// Intersection area over the area of `earlier`.
double overlap_fraction(const Box& later, const Box& earlier) {
  const double ix = std::max(0.0, std::min(later.cx + later.w / 2, earlier.cx + earlier.w / 2) -
                                      std::max(later.cx - later.w / 2, earlier.cx - earlier.w / 2));
  const double iy = std::max(0.0, std::min(later.cy + later.h / 2, earlier.cy + earlier.h / 2) -
                                      std::max(later.cy - later.h / 2, earlier.cy - earlier.h / 2));
  return ix * iy / (earlier.w * earlier.h);
}

Sample generate_one(Rng rng, const SynthConfig& cfg) {
  const Index h = cfg.height, w = cfg.width;
  Sample s;
  s.image = Tensor<float>(Shape4{1, 3, h, w});
  float* px = s.image.data();
  const Index hw = h * w;

  // Background gradient between two dim colors.
  float c0[3], c1[3];
  for (int k = 0; k < 3; ++k) {
    c0[k] = static_cast<float>(rng.uniform(0.05, 0.6));
    c1[k] = static_cast<float>(rng.uniform(0.05, 0.6));
  }
  const int dir = static_cast<int>(rng.uniform_int(0, 2));  // 0 horiz, 1 vert, 2 diag
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double t = 0;
      if (dir == 0)
        t = static_cast<double>(x) / std::max<Index>(1, w - 1);
      else if (dir == 1)
        t = static_cast<double>(y) / std::max<Index>(1, h - 1);
      else
        t = (static_cast<double>(x) + static_cast<double>(y)) / std::max<Index>(1, w + h - 2);
      for (int k = 0; k < 3; ++k)
        px[k * hw + y * w + x] = static_cast<float>(c0[k] + (c1[k] - c0[k]) * t);
    }

  // Vehicles: place fully inside, cap pairwise occlusion of earlier boxes.
  const Index count = rng.uniform_int(1, 6);
  const double base = static_cast<double>(std::min(h, w));
  for (Index i = 0; i < count; ++i) {
    const int cls = static_cast<int>(rng.uniform_int(0, kSynthClasses - 1));
    const ClassStyle& st = kStyles[cls];
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      box.w = rng.uniform(st.w_lo, st.w_hi) * base;
      box.h = box.w * rng.uniform(st.aspect_lo, st.aspect_hi);
      box.cx = rng.uniform(box.w / 2 + 1, static_cast<double>(w) - box.w / 2 - 1);
      box.cy = rng.uniform(box.h / 2 + 1, static_cast<double>(h) - box.h / 2 - 1);
      placed = true;
      for (const auto& prev : s.boxes)
        if (overlap_fraction(box, prev.box) > 0.6) {
          placed = false;
          break;
        }
    }
    if (!placed) continue;

    const float jr = static_cast<float>(rng.uniform(-0.08, 0.08));
    const float jg = static_cast<float>(rng.uniform(-0.08, 0.08));
    const float jb = static_cast<float>(rng.uniform(-0.08, 0.08));
    const Index x1 = static_cast<Index>(std::lround(box.cx - box.w / 2));
    const Index x2 = static_cast<Index>(std::lround(box.cx + box.w / 2));
    const Index y1 = static_cast<Index>(std::lround(box.cy - box.h / 2));
    const Index y2 = static_cast<Index>(std::lround(box.cy + box.h / 2));
    for (Index y = std::max<Index>(0, y1); y < std::min(h, y2); ++y)
      for (Index x = std::max<Index>(0, x1); x < std::min(w, x2); ++x) {
        // body, a lighter window band near the top, darker wheels at the base
        const double fy = (static_cast<double>(y) - y1) / std::max<Index>(1, y2 - y1);
        float shade = 1.0f;
        if (fy > 0.15 && fy < 0.45) shade = 1.35f;
        if (fy > 0.85) shade = 0.45f;
        px[0 * hw + y * w + x] = clamp01((kStyles[cls].r + jr) * shade);
        px[1 * hw + y * w + x] = clamp01((kStyles[cls].g + jg) * shade);
        px[2 * hw + y * w + x] = clamp01((kStyles[cls].b + jb) * shade);
      }

    // Clip to the image (placement keeps boxes interior; clamp regardless).
    box.cx = std::clamp(box.cx, box.w / 2, static_cast<double>(w) - box.w / 2);
    box.cy = std::clamp(box.cy, box.h / 2, static_cast<double>(h) - box.h / 2);
    s.boxes.push_back(GtBox{box, cls});
  }

  const double brightness = rng.uniform(0.3, 1.0);
  for (Index i = 0; i < 3 * hw; ++i)
    px[i] = clamp01(px[i] * brightness + 0.02 * rng.normal());
  return s;
}

}  // namespace

std::vector<Sample> synth_generate(std::uint64_t seed, Index n, const SynthConfig& cfg) {
  if (n < 1) throw ConfigError("synth_generate: sample count must be >= 1");
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("synth_generate: image too small");
  Rng base(seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(generate_one(base.fork(static_cast<std::uint64_t>(i)), cfg));
  return out;
}

void write_ppm(const std::string& path, const Tensor<float>& image) {
  const Shape4 d = image.dims();
  check_shape(d.n == 1 && d.c == 3, "write_ppm: expected (1,3,H,W), got " + d.str());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P6\n" << d.w << " " << d.h << "\n255\n";
  const Index hw = d.h * d.w;
  std::vector<unsigned char> row(static_cast<std::size_t>(3 * d.w));
  for (Index y = 0; y < d.h; ++y) {
    for (Index x = 0; x < d.w; ++x)
      for (int k = 0; k < 3; ++k) {
        const float v = image.data()[k * hw + y * d.w + x];
        const double scaled = std::lround(std::min(1.0f, std::max(0.0f, v)) * 255.0);
        row[static_cast<std::size_t>(3 * x + k)] = static_cast<unsigned char>(scaled);
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("failed writing: " + path);
}

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError("not a binary PPM: " + path);
  Index w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM header: " + path);
  in.get();  // single whitespace after header
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * w * h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataError("truncated PPM: " + path);
  Tensor<float> img(Shape4{1, 3, h, w});
  const Index hw = h * w;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k)
        img.data()[k * hw + y * w + x] =
            static_cast<float>(bytes[static_cast<std::size_t>(3 * (y * w + x) + k)]) / 255.0f;
  return img;
}

void save_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory: " + dir);
  std::ofstream ann(fs::path(dir) / "annotations.jsonl", std::ios::trunc);
  if (!ann) throw IoError("cannot write annotations in: " + dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i << ".ppm";
    write_ppm((fs::path(dir) / name.str()).string(), samples[i].image);
    json boxes = json::array();
    for (const auto& b : samples[i].boxes)
      boxes.push_back({{"cx", b.box.cx}, {"cy", b.box.cy}, {"w", b.box.w}, {"h", b.box.h}, {"class", b.class_id}});
    json rec = {{"image", name.str()}, {"boxes", boxes}};
    ann << rec.dump() << "\n";
  }
  if (!ann) throw IoError("failed writing annotations in: " + dir);
}

std::vector<Sample> load_dataset(const std::string& dir) {
  std::ifstream ann(fs::path(dir) / "annotations.jsonl");
  if (!ann) throw IoError("cannot open annotations in: " + dir);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("malformed annotation line: " + std::string(e.what()));
    }
    Sample s;
    s.image = read_ppm((fs::path(dir) / rec.at("image").get<std::string>()).string());
    for (const auto& b : rec.at("boxes")) {
      GtBox gt;
      gt.box.cx = b.at("cx").get<double>();
      gt.box.cy = b.at("cy").get<double>();
      gt.box.w = b.at("w").get<double>();
      gt.box.h = b.at("h").get<double>();
      gt.class_id = b.at("class").get<int>();
      if (gt.box.w <= 0 || gt.box.h <= 0) throw DataError("annotation with non-positive box extent");
      s.boxes.push_back(gt);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dtnet

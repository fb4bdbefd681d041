#include "segviz/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "segviz/seeds.hpp"

namespace segviz::synth {

namespace {

using json = nlohmann::json;

constexpr int kPlacementRetries = 200;

struct Ellipse {
  std::array<double, 3> center{};
  std::array<double, 3> semi{};              // semi-axis lengths, voxels
  std::array<std::array<double, 3>, 3> rot{};  // body-from-world rotation
  double max_semi = 0;
};

std::array<std::array<double, 3>, 3> rotation_2d(double a) {
  return {{{std::cos(a), std::sin(a), 0}, {-std::sin(a), std::cos(a), 0}, {0, 0, 1}}};
}

// ZYX Euler composition; enough variety for phantoms.
std::array<std::array<double, 3>, 3> rotation_3d(double a, double b, double c) {
  const double ca = std::cos(a), sa = std::sin(a);
  const double cb = std::cos(b), sb = std::sin(b);
  const double cc = std::cos(c), sc = std::sin(c);
  std::array<std::array<double, 3>, 3> r{};
  r[0] = {cb * cc, cb * sc, -sb};
  r[1] = {sa * sb * cc - ca * sc, sa * sb * sc + ca * cc, sa * cb};
  r[2] = {ca * sb * cc + sa * sc, ca * sb * sc - sa * cc, ca * cb};
  return r;
}

bool inside(const Ellipse& e, const std::array<double, 3>& p, int dims) {
  std::array<double, 3> d{};
  for (int i = 0; i < dims; ++i) d[i] = p[i] - e.center[i];
  double q = 0;
  for (int i = 0; i < dims; ++i) {
    double b = 0;
    for (int j = 0; j < dims; ++j) b += e.rot[i][j] * d[j];
    q += (b / e.semi[i]) * (b / e.semi[i]);
  }
  return q <= 1.0;
}

Ellipse draw_ellipse(std::mt19937_64& rng, const PhantomConfig& cfg, const OrganSpec& organ) {
  const int dims = cfg.spatial_dims;
  Ellipse e;
  std::uniform_real_distribution<double> frac(organ.axis_lo, organ.axis_hi);
  for (int i = 0; i < dims; ++i) {
    // axis fraction is the full axis length; keep at least one voxel of radius
    e.semi[i] = std::max(1.0, 0.5 * frac(rng) * static_cast<double>(cfg.size[i]));
    e.max_semi = std::max(e.max_semi, e.semi[i]);
  }
  std::uniform_real_distribution<double> angle(0.0, M_PI);
  if (dims == 2) {
    e.rot = rotation_2d(angle(rng));
  } else {
    const double a = angle(rng), b = angle(rng), c = angle(rng);
    e.rot = rotation_3d(a, b, c);
  }
  for (int i = 0; i < dims; ++i) {
    const double margin = e.max_semi + 1.0;
    const double hi = static_cast<double>(cfg.size[i]) - 1.0 - margin;
    if (hi < margin)
      fail(ErrorKind::generation, "phantom: organ does not fit inside the volume");
    std::uniform_real_distribution<double> pos(margin, hi);
    e.center[i] = pos(rng);
  }
  return e;
}

void rasterize(const Ellipse& e, const PhantomConfig& cfg, uint8_t cls,
               std::vector<uint8_t>& labels) {
  const int dims = cfg.spatial_dims;
  const size_t nz = dims == 3 ? cfg.size[0] : 1;
  const size_t ny = cfg.size[dims == 3 ? 1 : 0];
  const size_t nx = cfg.size[dims == 3 ? 2 : 1];
  size_t idx = 0;
  for (size_t z = 0; z < nz; ++z)
    for (size_t y = 0; y < ny; ++y)
      for (size_t x = 0; x < nx; ++x, ++idx) {
        std::array<double, 3> p{};
        if (dims == 2)
          p = {static_cast<double>(y), static_cast<double>(x), 0};
        else
          p = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        if (inside(e, p, dims)) labels[idx] = cls;
      }
}

bool overlaps(const std::vector<uint8_t>& labels, const Ellipse& e, const PhantomConfig& cfg) {
  std::vector<uint8_t> probe(labels.size(), 0);
  rasterize(e, cfg, 1, probe);
  bool any = false;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (probe[i] && labels[i]) return true;
    any = any || probe[i];
  }
  return !any;  // an ellipse that rasterizes to nothing also counts as a failure
}

void write_raw(const std::filesystem::path& path, const void* data, size_t bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::runtime, "cannot write " + path.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) fail(ErrorKind::runtime, "short write to " + path.string());
}

std::vector<char> read_raw(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) fail(ErrorKind::runtime, "cannot read " + path.string());
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<size_t>(size));
  f.read(buf.data(), size);
  if (!f) fail(ErrorKind::runtime, "short read from " + path.string());
  return buf;
}

json sample_to_json(const Sample& s, const std::string& split) {
  json j;
  j["id"] = s.id;
  j["split"] = split;
  j["shape"] = s.spatial();
  j["annotated"] = std::vector<int>(s.annotated.begin(), s.annotated.end());
  j["image"] = std::to_string(s.id) + ".img.bin";
  j["labels"] = std::to_string(s.id) + ".lbl.bin";
  return j;
}

void write_sample_files(const Sample& s, const std::filesystem::path& dir) {
  write_raw(dir / (std::to_string(s.id) + ".img.bin"), s.image.data(),
            s.image.size() * sizeof(float));
  write_raw(dir / (std::to_string(s.id) + ".lbl.bin"), s.labels.data(), s.labels.size());
}

Sample read_sample(const json& j, const std::filesystem::path& dir) {
  Sample s;
  s.id = j.at("id").get<uint64_t>();
  std::vector<size_t> spatial = j.at("shape").get<std::vector<size_t>>();
  for (int c : j.at("annotated").get<std::vector<int>>()) s.annotated.insert(c);
  Shape img_shape = {1};
  img_shape.insert(img_shape.end(), spatial.begin(), spatial.end());

  auto img_bytes = read_raw(dir / j.at("image").get<std::string>());
  if (img_bytes.size() != numel(img_shape) * sizeof(float))
    fail(ErrorKind::runtime, "image size mismatch for sample " + std::to_string(s.id));
  std::vector<float> values(numel(img_shape));
  std::memcpy(values.data(), img_bytes.data(), img_bytes.size());
  s.image = Tensor::from_data(img_shape, std::move(values));

  auto lbl_bytes = read_raw(dir / j.at("labels").get<std::string>());
  if (lbl_bytes.size() != numel(img_shape))
    fail(ErrorKind::runtime, "label size mismatch for sample " + std::to_string(s.id));
  s.labels.assign(lbl_bytes.begin(), lbl_bytes.end());
  return s;
}

}  // namespace

void PhantomConfig::validate() const {
  if (spatial_dims != 2 && spatial_dims != 3)
    fail(ErrorKind::config, "phantom: spatial_dims must be 2 or 3");
  if (size.size() != static_cast<size_t>(spatial_dims))
    fail(ErrorKind::config, "phantom: size must have one extent per axis");
  for (size_t s : size)
    if (s < 8) fail(ErrorKind::config, "phantom: each extent must be >= 8");
  for (const OrganSpec* o : {&liver, &spleen}) {
    if (o->axis_lo <= 0 || o->axis_hi >= 1 || o->axis_lo > o->axis_hi)
      fail(ErrorKind::config, "phantom: organ axis fractions must satisfy 0 < lo <= hi < 1");
    if (std::abs(o->intensity - background) < 3.0f * noise_sigma)
      fail(ErrorKind::config, "phantom: organ intensity too close to background for the noise");
  }
  if (noise_sigma < 0) fail(ErrorKind::config, "phantom: noise_sigma must be >= 0");
}

Sample generate_sample(const PhantomConfig& cfg, uint64_t sample_id) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x5A11, sample_id));

  const size_t voxels = numel(Shape(cfg.size.begin(), cfg.size.end()));
  Sample s;
  s.id = sample_id;
  s.labels.assign(voxels, 0);
  s.annotated = {1, 2};

  Ellipse liver = draw_ellipse(rng, cfg, cfg.liver);
  rasterize(liver, cfg, 1, s.labels);

  bool placed = false;
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    Ellipse spleen = draw_ellipse(rng, cfg, cfg.spleen);
    if (!overlaps(s.labels, spleen, cfg)) {
      rasterize(spleen, cfg, 2, s.labels);
      placed = true;
      break;
    }
  }
  if (!placed)
    fail(ErrorKind::generation,
         "phantom: could not place disjoint organs in sample " + std::to_string(sample_id));

  Shape img_shape = {1};
  img_shape.insert(img_shape.end(), cfg.size.begin(), cfg.size.end());
  s.image = Tensor::zeros(img_shape);
  std::normal_distribution<float> noise(0.0f, cfg.noise_sigma);
  for (size_t i = 0; i < voxels; ++i) {
    float v = cfg.background;
    if (s.labels[i] == 1) v = cfg.liver.intensity;
    if (s.labels[i] == 2) v = cfg.spleen.intensity;
    v += cfg.noise_sigma > 0 ? noise(rng) : 0.0f;
    s.image.data()[i] = std::clamp(v, 0.0f, 1.0f);
  }
  return s;
}

Sample mask_annotations(Sample sample, const std::set<int>& keep) {
  for (int c : keep)
    if (c != 1 && c != 2) fail(ErrorKind::invalid_argument, "mask_annotations: unknown class");
  for (uint8_t& l : sample.labels)
    if (l != 0 && !keep.count(l)) l = 0;
  sample.annotated = keep;
  return sample;
}

Tensor normalize_intensity(const Tensor& volume) {
  if (!volume.defined() || volume.size() == 0)
    fail(ErrorKind::invalid_argument, "normalize_intensity: empty volume");
  float lo = volume.data()[0], hi = volume.data()[0];
  for (size_t i = 1; i < volume.size(); ++i) {
    lo = std::min(lo, volume.data()[i]);
    hi = std::max(hi, volume.data()[i]);
  }
  if (lo == hi)
    fail(ErrorKind::degenerate_range, "normalize_intensity: constant volume has no range");
  Tensor out = Tensor::zeros(volume.shape());
  const float inv = 1.0f / (hi - lo);
  for (size_t i = 0; i < volume.size(); ++i) out.data()[i] = (volume.data()[i] - lo) * inv;
  return out;
}

std::vector<Patch> sample_patches(const Sample& sample, const std::vector<size_t>& patch_size,
                                  int count, double pos_ratio, int class_id, uint64_t seed) {
  const std::vector<size_t> spatial = sample.spatial();
  if (patch_size.size() != spatial.size())
    fail(ErrorKind::invalid_argument, "sample_patches: patch rank mismatch");
  for (size_t i = 0; i < spatial.size(); ++i)
    if (patch_size[i] == 0 || patch_size[i] > spatial[i])
      fail(ErrorKind::invalid_argument, "sample_patches: patch larger than volume");
  if (pos_ratio < 0 || pos_ratio > 1)
    fail(ErrorKind::invalid_argument, "sample_patches: pos_ratio outside [0, 1]");
  if (class_id != 1 && class_id != 2)
    fail(ErrorKind::invalid_argument, "sample_patches: unknown class");

  const size_t rank = spatial.size();
  std::vector<size_t> strides(rank, 1);
  for (size_t i = rank; i-- > 1;) strides[i - 1] = strides[i] * spatial[i];

  // Valid center box: windows centered there stay inside the volume.
  std::vector<size_t> lo(rank), hi(rank);
  for (size_t i = 0; i < rank; ++i) {
    lo[i] = patch_size[i] / 2;
    hi[i] = spatial[i] - patch_size[i] + patch_size[i] / 2;  // inclusive
  }
  auto in_box = [&](size_t flat) {
    for (size_t i = 0; i < rank; ++i) {
      const size_t c = (flat / strides[i]) % spatial[i];
      if (c < lo[i] || c > hi[i]) return false;
    }
    return true;
  };

  std::vector<size_t> fg, bg, fg_all, bg_all;
  for (size_t i = 0; i < sample.labels.size(); ++i) {
    const bool is_fg = sample.labels[i] == class_id;
    (is_fg ? fg_all : bg_all).push_back(i);
    if (in_box(i)) (is_fg ? fg : bg).push_back(i);
  }
  if (pos_ratio > 0 && fg_all.empty())
    fail(ErrorKind::invalid_argument, "sample_patches: volume has no foreground voxel");
  if (fg.empty()) fg = fg_all;  // clamp fallback near boundaries
  if (bg.empty()) bg = bg_all.empty() ? fg_all : bg_all;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const size_t patch_voxels = numel(Shape(patch_size.begin(), patch_size.end()));
  Shape patch_shape = {1};
  patch_shape.insert(patch_shape.end(), patch_size.begin(), patch_size.end());

  std::vector<Patch> out;
  out.reserve(static_cast<size_t>(count));
  for (int n = 0; n < count; ++n) {
    const bool want_fg = coin(rng) < pos_ratio;
    const auto& pool = want_fg ? fg : bg;
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    const size_t center = pool[pick(rng)];

    std::vector<size_t> start(rank);
    for (size_t i = 0; i < rank; ++i) {
      const size_t c = (center / strides[i]) % spatial[i];
      const size_t s = c >= patch_size[i] / 2 ? c - patch_size[i] / 2 : 0;
      start[i] = std::min(s, spatial[i] - patch_size[i]);
    }

    Patch p;
    p.image = Tensor::zeros(patch_shape);
    p.label = Tensor::zeros(patch_shape);
    for (size_t v = 0; v < patch_voxels; ++v) {
      // unravel v into per-axis offsets inside the window
      size_t tmp = v, src = 0;
      for (size_t i = rank; i-- > 0;) {
        const size_t off = tmp % patch_size[i];
        tmp /= patch_size[i];
        src += (start[i] + off) * strides[i];
      }
      p.image.data()[v] = sample.image.data()[src];
      p.label.data()[v] = sample.labels[src] == class_id ? 1.0f : 0.0f;
    }
    out.push_back(std::move(p));
  }
  return out;
}

NodeDataset make_node_dataset(const PhantomConfig& cfg, const std::string& task, int class_id,
                              size_t n, uint64_t id_offset, double split) {
  if (split <= 0 || split >= 1) fail(ErrorKind::config, "dataset split must be in (0, 1)");
  NodeDataset ds;
  ds.task = task;
  ds.class_id = class_id;
  const size_t n_train = static_cast<size_t>(std::llround(static_cast<double>(n) * split));
  if (n_train == 0 || n_train == n)
    fail(ErrorKind::config, "dataset split leaves an empty train or val set");
  for (size_t i = 0; i < n; ++i) {
    Sample s = mask_annotations(generate_sample(cfg, id_offset + i), {class_id});
    (i < n_train ? ds.train : ds.val).push_back(std::move(s));
  }
  return ds;
}

std::vector<Sample> make_test_set(const PhantomConfig& cfg, size_t n, uint64_t id_offset) {
  std::vector<Sample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(generate_sample(cfg, id_offset + i));
  return out;
}

void save_node_dataset(const NodeDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["task"] = ds.task;
  manifest["class_id"] = ds.class_id;
  manifest["samples"] = json::array();
  for (const auto& s : ds.train) {
    manifest["samples"].push_back(sample_to_json(s, "train"));
    write_sample_files(s, dir);
  }
  for (const auto& s : ds.val) {
    manifest["samples"].push_back(sample_to_json(s, "val"));
    write_sample_files(s, dir);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::runtime, "cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

NodeDataset load_node_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::runtime, "no manifest in " + dir.string());
  json manifest = json::parse(f);
  NodeDataset ds;
  ds.task = manifest.at("task").get<std::string>();
  ds.class_id = manifest.at("class_id").get<int>();
  for (const auto& j : manifest.at("samples")) {
    const std::string split = j.at("split").get<std::string>();
    Sample s = read_sample(j, dir);
    if (split == "train")
      ds.train.push_back(std::move(s));
    else if (split == "val")
      ds.val.push_back(std::move(s));
    else
      fail(ErrorKind::runtime, "unknown split '" + split + "' in " + dir.string());
  }
  return ds;
}

void save_test_set(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["task"] = "";
  manifest["class_id"] = 0;
  manifest["samples"] = json::array();
  for (const auto& s : samples) {
    manifest["samples"].push_back(sample_to_json(s, "test"));
    write_sample_files(s, dir);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::runtime, "cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

std::vector<Sample> load_test_set(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::runtime, "no manifest in " + dir.string());
  json manifest = json::parse(f);
  std::vector<Sample> out;
  for (const auto& j : manifest.at("samples")) out.push_back(read_sample(j, dir));
  return out;
}

}  // namespace segviz::synth

#include "sxda/datagen.hpp"
#include "sxda/ops.hpp"
#include "sxda/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "json.hpp"

namespace sxda {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.ppm", t);
  return buf;
}

std::string clip_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%04zu", i);
  return buf;
}

void require_image(const char* op, const Image& img) {
  if (img.rank() != 3 || img.dim(2) != 3)
    throw DimensionError(std::string(op) + ": expected H x W x 3 image, got " +
                         shape_str(img.dims()));
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

}  // namespace

void DegradationSpec::validate() const {
  if (!(gamma >= 1)) throw ConfigError("degradation gamma must be >= 1, got " + std::to_string(gamma));
  if (!(scale > 0 && scale <= 1))
    throw ConfigError("brightness scale must be in (0, 1], got " + std::to_string(scale));
  if (!(sigma_r >= 0) || !(sigma_s >= 0)) throw ConfigError("noise sigmas must be non-negative");
}

void DegradationRanges::validate() const {
  DegradationSpec{gamma_min, scale_min, sigma_r, sigma_s, 0}.validate();
  DegradationSpec{gamma_max, scale_max, sigma_r, sigma_s, 0}.validate();
  if (gamma_min > gamma_max || scale_min > scale_max)
    throw ConfigError("degradation ranges must have min <= max");
}

DegradationSpec DegradationRanges::sample(Rng& rng) const {
  DegradationSpec s;
  s.gamma = rng.uniform(gamma_min, gamma_max);
  s.scale = rng.uniform(scale_min, scale_max);
  s.sigma_r = sigma_r;
  s.sigma_s = sigma_s;
  s.seed = rng.next();
  return s;
}

void Clip::validate() const {
  if (frames.size() < 3)
    throw ConfigError("a clip needs at least 3 frames, got " + std::to_string(frames.size()));
  for (const auto& f : frames) {
    require_image("clip", f);
    if (f.dims() != frames[0].dims())
      throw DimensionError("clip frames differ in shape: " + shape_str(frames[0].dims()) +
                           " vs " + shape_str(f.dims()));
  }
  if (gt.size() != 1 && gt.size() != frames.size())
    throw DataError("clip has " + std::to_string(gt.size()) + " ground-truth frames for " +
                    std::to_string(frames.size()) + " frames");
  for (const auto& g : gt)
    if (g.dims() != frames[0].dims())
      throw DimensionError("ground truth " + shape_str(g.dims()) + " does not match frames " +
                           shape_str(frames[0].dims()));
  if (trajectory && trajectory->size() != frames.size())
    throw DataError("trajectory has " + std::to_string(trajectory->size()) + " entries for " +
                    std::to_string(frames.size()) + " frames");
}

Image gen_scene(std::uint64_t seed, std::size_t height, std::size_t width) {
  if (height < 32 || width < 32)
    throw ConfigError("scenes must be at least 32x32, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  Rng rng(derive_seed(seed, "scene"));
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  std::vector<double> img(height * width * 3);

  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) c0[c] = rng.uniform(0.1, 0.9), c1[c] = rng.uniform(0.1, 0.9);
  const double theta = rng.uniform(0, 2 * std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double u = ((x + 0.5) / w - 0.5) * ct + ((y + 0.5) / h - 0.5) * st;
      const double t = std::clamp(u + 0.5, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img[(y * width + x) * 3 + c] = c0[c] + (c1[c] - c0[c]) * t;
    }

  // Shapes are blended by pixel coverage estimated from the signed distance
  // to the edge, which gives one pixel of anti-aliasing.
  const std::uint64_t shapes = 5 + rng.below(11);
  const double extent = std::min(h, w);
  for (std::uint64_t s = 0; s < shapes; ++s) {
    double color[3];
    for (double& c : color) c = rng.uniform(0.05, 0.95);
    const bool disk = rng.uniform() < 0.5;
    const double cx = rng.uniform(0, w), cy = rng.uniform(0, h);
    const double rx = rng.uniform(0.05, 0.25) * extent;
    const double ry = disk ? rx : rng.uniform(0.05, 0.25) * extent;
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double px = x + 0.5 - cx, py = y + 0.5 - cy;
        const double dist = disk ? std::hypot(px, py) - rx
                                 : std::max(std::abs(px) - rx, std::abs(py) - ry);
        const double cover = std::clamp(0.5 - dist, 0.0, 1.0);
        if (cover == 0) continue;
        double* p = &img[(y * width + x) * 3];
        for (int c = 0; c < 3; ++c) p[c] = p[c] * (1 - cover) + color[c] * cover;
      }
  }

  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves(4);
  for (auto& wv : waves) {
    const double f = rng.uniform(0.02, 0.12), a = rng.uniform(0, 2 * std::numbers::pi);
    wv = Wave{f * std::cos(a), f * std::sin(a), rng.uniform(0, 2 * std::numbers::pi), 0.03};
  }
  Image out({height, width, 3});
  float* o = out.data();
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      double tex = 0;
      for (const auto& wv : waves)
        tex += wv.amp * std::sin(2 * std::numbers::pi * (wv.fx * x + wv.fy * y) + wv.phase);
      for (int c = 0; c < 3; ++c) {
        const std::size_t i = (y * width + x) * 3 + c;
        o[i] = static_cast<float>(std::clamp(img[i] + tex, 0.0, 1.0));
      }
    }
  return out;
}

Image degrade_unclipped(const Image& img, const DegradationSpec& spec, std::uint64_t instance_seed) {
  require_image("degrade", img);
  spec.validate();
  Rng rng(instance_seed);
  const double sr2 = spec.sigma_r * spec.sigma_r;
  const bool noisy = spec.sigma_r > 0 || spec.sigma_s > 0;
  Image out(img.dims());
  const float* in = img.data();
  float* o = out.data();
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double s = spec.scale * std::pow(static_cast<double>(in[i]), spec.gamma);
    double v = s;
    if (noisy) v += std::sqrt(sr2 + spec.sigma_s * s) * rng.normal();
    o[i] = static_cast<float>(v);
  }
  return out;
}

Image degrade(const Image& img, const DegradationSpec& spec, std::uint64_t instance_seed) {
  Image out = degrade_unclipped(img, spec, instance_seed);
  for (float& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Clip gen_static_clip(const Image& scene, const DegradationSpec& spec, std::size_t frames) {
  if (frames < 3) throw ConfigError("a clip needs at least 3 frames, got " + std::to_string(frames));
  require_image("gen_static_clip", scene);
  Clip clip;
  clip.spec = spec;
  for (std::size_t t = 0; t < frames; ++t)
    clip.frames.push_back(degrade(scene, spec, derive_seed(spec.seed, "frame", t)));
  clip.gt.push_back(scene);
  return clip;
}

Image translate(const Image& img, double dx, double dy) {
  require_image("translate", img);
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  const auto H = static_cast<std::int64_t>(h), W = static_cast<std::int64_t>(w);
  Image out(img.dims());
  const float* in = img.data();
  float* o = out.data();
  for (std::size_t y = 0; y < h; ++y) {
    const double sy = static_cast<double>(y) - dy;
    const double fy0 = std::floor(sy);
    const double fy = sy - fy0;
    const auto y0 = static_cast<std::int64_t>(fy0);
    const std::int64_t ya = reflect_index(y0, H), yb = reflect_index(y0 + 1, H);
    for (std::size_t x = 0; x < w; ++x) {
      const double sx = static_cast<double>(x) - dx;
      const double fx0 = std::floor(sx);
      const double fx = sx - fx0;
      const auto x0 = static_cast<std::int64_t>(fx0);
      const std::int64_t xa = reflect_index(x0, W), xb = reflect_index(x0 + 1, W);
      for (std::size_t k = 0; k < c; ++k) {
        auto at = [&](std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(in[(static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c + k]);
        };
        const double top = (1 - fx) * at(ya, xa) + fx * at(ya, xb);
        const double bot = (1 - fx) * at(yb, xa) + fx * at(yb, xb);
        o[(y * w + x) * c + k] = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

Trajectory random_trajectory(Rng& rng, std::size_t frames, std::size_t height, std::size_t width,
                             double max_speed) {
  if (frames == 0) return {};
  const double room = static_cast<double>(std::min(height, width)) / 2 - 1;
  double speed = max_speed;
  if (frames > 1) speed = std::min(speed, room / static_cast<double>(frames - 1));
  const double vx = rng.uniform(-speed, speed), vy = rng.uniform(-speed, speed);
  Trajectory traj(frames);
  for (std::size_t t = 0; t < frames; ++t)
    traj[t] = Offset{vx * static_cast<double>(t), vy * static_cast<double>(t)};
  return traj;
}

Clip gen_motion_clip(const Image& scene, const Trajectory& traj, const DegradationSpec& spec,
                     std::size_t frames) {
  if (frames < 3) throw ConfigError("a clip needs at least 3 frames, got " + std::to_string(frames));
  require_image("gen_motion_clip", scene);
  if (traj.size() != frames)
    throw ConfigError("trajectory has " + std::to_string(traj.size()) + " offsets for " +
                      std::to_string(frames) + " frames");
  if (traj[0] != Offset{})
    throw ConfigError("trajectories must start at offset (0, 0)");
  const double hx = static_cast<double>(scene.dim(1)) / 2, hy = static_cast<double>(scene.dim(0)) / 2;
  for (std::size_t t = 0; t < frames; ++t)
    if (!(std::abs(traj[t].dx) < hx && std::abs(traj[t].dy) < hy))
      throw ConfigError("offset (" + std::to_string(traj[t].dx) + ", " +
                        std::to_string(traj[t].dy) + ") at frame " + std::to_string(t) +
                        " exceeds half the frame extent");
  Clip clip;
  clip.spec = spec;
  clip.trajectory = traj;
  for (std::size_t t = 0; t < frames; ++t) {
    Image clean = translate(scene, traj[t].dx, traj[t].dy);
    clip.frames.push_back(degrade(clean, spec, derive_seed(spec.seed, "frame", t)));
    clip.gt.push_back(std::move(clean));
  }
  return clip;
}

Image quantize8(const Image& img) {
  Image out(img.dims());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = from_byte(to_byte(img[i]));
  return out;
}

std::string encode_ppm(const Image& img) {
  require_image("encode_ppm", img);
  std::string out = "P6\n" + std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) +
                    "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[header + i] = static_cast<char>(to_byte(img[i]));
  return out;
}

Image decode_ppm(const std::string& bytes, const std::string& source) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::uint64_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::uint64_t>(bytes[pos++] - '0');
      if (++digits > 9) throw PpmHeaderError(source + ": " + what + " is too large");
    }
    if (digits == 0) throw PpmHeaderError(source + ": malformed PPM header, expected " + what);
    return static_cast<std::size_t>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw PpmHeaderError(source + ": not a binary PPM (missing P6 magic)");
  pos = 2;
  const std::size_t width = number("width");
  const std::size_t height = number("height");
  const std::size_t maxval = number("maxval");
  if (width == 0 || height == 0) throw PpmHeaderError(source + ": zero image extent");
  if (maxval != 255)
    throw PpmHeaderError(source + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw PpmHeaderError(source + ": malformed PPM header, no separator before pixel data");
  ++pos;
  const std::size_t n = width * height * 3;
  if (bytes.size() - pos != n)
    throw DataError(source + ": expected " + std::to_string(n) + " pixel bytes, found " +
                    std::to_string(bytes.size() - pos));
  Image img({height, width, 3});
  for (std::size_t i = 0; i < n; ++i) img[i] = from_byte(static_cast<std::uint8_t>(bytes[pos + i]));
  return img;
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::size_t count_frame_files(const fs::path& dir) {
  std::size_t n = 0;
  if (!fs::is_directory(dir)) return 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with("frame_") && name.ends_with(".ppm")) ++n;
  }
  return n;
}

}  // namespace

void write_ppm(const Image& img, const fs::path& path) { write_file(path, encode_ppm(img)); }

Image read_ppm(const fs::path& path) { return decode_ppm(read_file(path), path.string()); }

void write_clip(const Clip& clip, const fs::path& dir) {
  clip.validate();
  fs::create_directories(dir / "gt");
  for (std::size_t t = 0; t < clip.frames.size(); ++t) write_ppm(clip.frames[t], dir / frame_name(t));
  for (std::size_t t = 0; t < clip.gt.size(); ++t) write_ppm(clip.gt[t], dir / "gt" / frame_name(t));
  json m;
  m["frames"] = clip.frames.size();
  m["width"] = clip.width();
  m["height"] = clip.height();
  m["gamma"] = clip.spec.gamma;
  m["scale"] = clip.spec.scale;
  m["sigma_r"] = clip.spec.sigma_r;
  m["sigma_s"] = clip.spec.sigma_s;
  m["seed"] = clip.spec.seed;
  if (clip.trajectory) {
    json traj = json::array();
    for (const auto& o : *clip.trajectory) traj.push_back({o.dx, o.dy});
    m["trajectory"] = traj;
  } else {
    m["trajectory"] = nullptr;
  }
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

Clip read_clip(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw MissingManifestError(dir.string() + ": missing manifest.json");
  Clip clip;
  std::size_t frames = 0, width = 0, height = 0;
  try {
    const json m = json::parse(read_file(mpath));
    frames = m.at("frames").get<std::size_t>();
    width = m.at("width").get<std::size_t>();
    height = m.at("height").get<std::size_t>();
    clip.spec.gamma = m.at("gamma").get<double>();
    clip.spec.scale = m.at("scale").get<double>();
    clip.spec.sigma_r = m.at("sigma_r").get<double>();
    clip.spec.sigma_s = m.at("sigma_s").get<double>();
    clip.spec.seed = m.at("seed").get<std::uint64_t>();
    const json& traj = m.at("trajectory");
    if (!traj.is_null()) {
      Trajectory tr;
      for (const auto& o : traj) tr.push_back(Offset{o.at(0).get<double>(), o.at(1).get<double>()});
      clip.trajectory = std::move(tr);
    }
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": invalid manifest: " + e.what());
  }
  const std::size_t present = count_frame_files(dir);
  if (present != frames)
    throw FrameCountError(dir.string() + ": manifest lists " + std::to_string(frames) +
                          " frames but " + std::to_string(present) + " frame files are present");
  const std::size_t gt_expected = clip.trajectory ? frames : 1;
  const std::size_t gt_present = count_frame_files(dir / "gt");
  if (gt_present != gt_expected)
    throw FrameCountError(dir.string() + ": expected " + std::to_string(gt_expected) +
                          " ground-truth frames but " + std::to_string(gt_present) +
                          " are present");
  auto load = [&](const fs::path& p) {
    Image img = read_ppm(p);
    if (img.dim(0) != height || img.dim(1) != width)
      throw DataError(p.string() + ": extents " + std::to_string(img.dim(1)) + "x" +
                      std::to_string(img.dim(0)) + " differ from manifest " +
                      std::to_string(width) + "x" + std::to_string(height));
    return img;
  };
  for (std::size_t t = 0; t < frames; ++t) clip.frames.push_back(load(dir / frame_name(t)));
  for (std::size_t t = 0; t < gt_expected; ++t) clip.gt.push_back(load(dir / "gt" / frame_name(t)));
  clip.validate();
  return clip;
}

void CorpusConfig::validate() const {
  if (train_clips == 0) throw ConfigError("corpus needs at least one training clip");
  if (frames < 3) throw ConfigError("clips need at least 3 frames, got " + std::to_string(frames));
  if (size < 32) throw ConfigError("frame size must be at least 32, got " + std::to_string(size));
  if (!(max_speed >= 0)) throw ConfigError("max_speed must be non-negative");
  if (threads == 0) throw ConfigError("threads must be at least 1");
  ranges.validate();
}

namespace {

std::vector<Image> load_scenes(const fs::path& dir, std::size_t size) {
  if (!fs::is_directory(dir)) throw ConfigError("scene directory " + dir.string() + " not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("scene directory " + dir.string() + " has no .ppm files");
  std::vector<Image> scenes;
  for (const auto& f : files) {
    Image img = read_ppm(f);
    const std::size_t h = img.dim(0), w = img.dim(1);
    if (h < size || w < size)
      throw DataError(f.string() + " is smaller than the " + std::to_string(size) + "px frames");
    const std::size_t oy = (h - size) / 2, ox = (w - size) / 2;
    Image crop({size, size, 3});
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          crop[(y * size + x) * 3 + c] = img[((oy + y) * w + ox + x) * 3 + c];
    scenes.push_back(std::move(crop));
  }
  return scenes;
}

struct Job {
  std::string split;
  std::size_t index;
  bool motion;
};

Clip make_clip(const CorpusConfig& cfg, const std::vector<Image>& scenes, const Job& job,
               std::size_t scene_slot) {
  const std::uint64_t clip_seed = derive_seed(cfg.seed, job.split, job.index);
  Image scene = scenes.empty() ? gen_scene(derive_seed(clip_seed, "scene"), cfg.size, cfg.size)
                               : scenes[scene_slot % scenes.size()];
  Rng spec_rng(derive_seed(clip_seed, "degradation"));
  const DegradationSpec spec = cfg.ranges.sample(spec_rng);
  if (!job.motion) return gen_static_clip(scene, spec, cfg.frames);
  Rng motion_rng(derive_seed(clip_seed, "motion"));
  const Trajectory traj = random_trajectory(motion_rng, cfg.frames, cfg.size, cfg.size, cfg.max_speed);
  return gen_motion_clip(scene, traj, spec, cfg.frames);
}

}  // namespace

CorpusIndex generate_corpus(const CorpusConfig& cfg, const fs::path& dir) {
  cfg.validate();
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir)))
    throw ConfigError("output directory " + dir.string() + " is not empty");
  std::vector<Image> scenes;
  if (cfg.scenes_dir) scenes = load_scenes(*cfg.scenes_dir, cfg.size);

  std::vector<Job> jobs;
  CorpusIndex index;
  auto add = [&](const std::string& split, std::size_t n, bool motion, std::vector<std::string>& out) {
    for (std::size_t i = 0; i < n; ++i) {
      jobs.push_back(Job{split, i, motion});
      out.push_back(split + "/" + clip_name(i));
    }
  };
  add("train", cfg.train_clips, false, index.train);
  add("test_static", cfg.test_static_clips, false, index.test_static);
  add("test_motion", cfg.test_motion_clips, true, index.test_motion);

  const fs::path target = fs::absolute(dir).lexically_normal();
  const fs::path tmp = target.parent_path() / ("." + target.filename().string() + ".partial");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
      const Clip clip = make_clip(cfg, scenes, jobs[j], j);
      write_clip(clip, tmp / jobs[j].split / clip_name(jobs[j].index));
    });

    json idx;
    idx["train"] = index.train;
    idx["test_static"] = index.test_static;
    idx["test_motion"] = index.test_motion;
    idx["seed"] = cfg.seed;
    idx["frames"] = cfg.frames;
    idx["size"] = cfg.size;
    write_file(tmp / "index.json", idx.dump(2) + "\n");
    if (fs::exists(target)) fs::remove(target);
    fs::rename(tmp, target);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  return index;
}

CorpusIndex read_corpus_index(const fs::path& dir) {
  const fs::path p = dir / "index.json";
  if (!fs::exists(p)) throw MissingManifestError(dir.string() + ": missing index.json");
  try {
    const json idx = json::parse(read_file(p));
    CorpusIndex out;
    out.train = idx.at("train").get<std::vector<std::string>>();
    out.test_static = idx.at("test_static").get<std::vector<std::string>>();
    out.test_motion = idx.at("test_motion").get<std::vector<std::string>>();
    return out;
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": invalid corpus index: " + e.what());
  }
}

}  // namespace sxda

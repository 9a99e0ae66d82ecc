#include "breaknet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "breaknet/tensor_io.hpp"

namespace breaknet {

namespace fs = std::filesystem;

namespace {

std::string frame_name(int f, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "frame_%04d_%s.bnt", f, suffix);
  return buf;
}

Tensorf labels_tensor(const LabelMap& l) {
  Tensorf t({l.height, l.width});
  std::transform(l.data.begin(), l.data.end(), t.ptr(), [](std::uint8_t v) { return static_cast<float>(v); });
  return t;
}

LabelMap labels_from(const Tensorf& t, const fs::path& src) {
  if (t.rank() != 2) throw IoError(src.string() + ": labels must be rank 2");
  LabelMap l(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)));
  for (std::size_t i = 0; i < l.data.size(); ++i) {
    const float v = t.data()[i];
    if (!(v >= 0.0f && v < 255.0f) || v != std::floor(v)) throw IoError(src.string() + ": invalid class id");
    l.data[i] = static_cast<std::uint8_t>(v);
  }
  return l;
}

Tensord boundaries_tensor(const BoundaryProfile& p) {
  return Tensord({p.num_boundaries, p.width}, p.rows);
}

BoundaryProfile boundaries_from(const Tensord& t, double pitch, const fs::path& src) {
  if (t.rank() != 2) throw IoError(src.string() + ": boundaries must be rank 2");
  BoundaryProfile p(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), pitch);
  std::copy(t.data().begin(), t.data().end(), p.rows.begin());
  return p;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

nlohmann::json encode_shadow(const ShadowMask& mask) {
  nlohmann::json runs = nlohmann::json::array();
  const int W = static_cast<int>(mask.shadowed.size());
  int x = 0;
  while (x < W) {
    if (!mask.shadowed[x]) {
      ++x;
      continue;
    }
    int end = x;
    nlohmann::json run = {x, 0};
    while (end < W && mask.shadowed[end]) run.push_back(mask.start_row[end++]);
    run[1] = end;
    runs.push_back(run);
    x = end;
  }
  return runs;
}

ShadowMask decode_shadow(const nlohmann::json& runs, int width) {
  ShadowMask m;
  m.shadowed.assign(static_cast<std::size_t>(width), 0);
  m.start_row.assign(static_cast<std::size_t>(width), -1);
  for (const auto& run : runs) {
    const int b = run.at(0).get<int>(), e = run.at(1).get<int>();
    if (b < 0 || e > width || e <= b || static_cast<int>(run.size()) != 2 + e - b) {
      throw IoError("malformed shadow run in meta.json");
    }
    for (int x = b; x < e; ++x) {
      m.shadowed[x] = 1;
      m.start_row[x] = run.at(2 + x - b).get<int>();
    }
  }
  return m;
}

void write_volume(const fs::path& dir, const Volume& volume, const DegradedLabels* degraded) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json meta = {{"spec", to_json(volume.spec)},
                         {"seed", volume.spec.seed},
                         {"axial_pitch_um", volume.spec.axial_pitch_um},
                         {"lateral_pitch_um", volume.spec.lateral_pitch_um},
                         {"num_frames", volume.frames.size()}};
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t f = 0; f < volume.frames.size(); ++f) {
    const auto& s = volume.frames[f];
    const int fi = static_cast<int>(f);
    save_tensor(dir / frame_name(fi, "image"), Tensorf({s.height(), s.width()}, s.image));
    save_tensor(dir / frame_name(fi, "labels"), labels_tensor(s.labels));
    save_tensor(dir / frame_name(fi, "boundaries"), boundaries_tensor(s.boundaries));
    if (degraded) {
      save_tensor(dir / frame_name(fi, "labels_lq"), labels_tensor(degraded->labels[f]));
      save_tensor(dir / frame_name(fi, "boundaries_lq"), boundaries_tensor(degraded->boundaries[f]));
    }
    frames.push_back({{"index", fi}, {"shadow", encode_shadow(s.shadow)}});
  }
  meta["frames"] = frames;
  if (degraded) {
    const int stride = degraded->keyframes.size() > 1 ? degraded->keyframes[1] - degraded->keyframes[0]
                                                      : static_cast<int>(volume.frames.size());
    meta["degraded"] = {{"keyframe_stride", stride},
                        {"keyframes", degraded->keyframes},
                        {"max_abs_displacement_px", degraded->max_abs_displacement}};
  }
  std::ofstream os(dir / "meta.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "meta.json").string());
  os << meta.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + (dir / "meta.json").string());
}

namespace {

void load_volume(const fs::path& dir, Dataset& out) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw IoError("cannot open " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
    const double ap = meta.at("axial_pitch_um").get<double>();
    const double lp = meta.at("lateral_pitch_um").get<double>();
    const auto& frames = meta.at("frames");
    const bool has_lq = meta.contains("degraded");
    if (!out.scans.empty() && has_lq != !out.degraded.empty()) {
      throw IoError(dir.string() + ": some volumes carry degraded labels and some do not");
    }
    for (const auto& fr : frames) {
      const int f = fr.at("index").get<int>();
      BScanSample s;
      const auto img_path = dir / frame_name(f, "image");
      const Tensorf img = load_tensor<float>(img_path);
      if (img.rank() != 2) throw IoError(img_path.string() + ": image must be rank 2");
      s.image.assign(img.data().begin(), img.data().end());
      s.labels = labels_from(load_tensor<float>(dir / frame_name(f, "labels")), dir / frame_name(f, "labels"));
      if (s.labels.height != img.dim(0) || s.labels.width != img.dim(1)) {
        throw IoError(dir.string() + ": image and labels of frame " + std::to_string(f) + " differ in size");
      }
      s.boundaries = boundaries_from(load_tensor<double>(dir / frame_name(f, "boundaries")), ap,
                                     dir / frame_name(f, "boundaries"));
      s.axial_pitch_um = ap;
      s.lateral_pitch_um = lp;
      s.shadow = decode_shadow(fr.at("shadow"), s.width());
      if (has_lq) {
        out.degraded.push_back(
            labels_from(load_tensor<float>(dir / frame_name(f, "labels_lq")), dir / frame_name(f, "labels_lq")));
        out.degraded_boundaries.push_back(boundaries_from(load_tensor<double>(dir / frame_name(f, "boundaries_lq")), ap,
                                                          dir / frame_name(f, "boundaries_lq")));
      }
      out.sources.push_back((dir / ("frame_" + std::to_string(f))).string());
      out.scans.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "meta.json").string() + ": " + e.what());
  }
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
  Dataset out;
  if (fs::exists(root / "meta.json")) {
    load_volume(root, out);
    return out;
  }
  if (!fs::is_directory(root)) throw IoError("dataset directory " + root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IoError("no volumes found under " + root.string());
  for (const auto& d : dirs) load_volume(d, out);
  return out;
}

std::vector<BScanSample> with_degraded_labels(const Dataset& data) {
  if (data.degraded.size() != data.scans.size()) throw IoError("dataset has no degraded labels (synth --degrade)");
  std::vector<BScanSample> out = data.scans;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].labels = data.degraded[i];
    out[i].boundaries = data.degraded_boundaries[i];
  }
  return out;
}

std::string dataset_hash(const std::vector<BScanSample>& scans) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : scans) {
    const std::int32_t dims[2] = {s.height(), s.width()};
    feed(dims, sizeof dims);
    feed(s.image.data(), s.image.size() * sizeof(float));
    feed(s.labels.data.data(), s.labels.data.size());
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<BScanSample> gen_mixed_samples(const SynthSpec& base, int count, std::uint64_t seed,
                                           const std::vector<ShadowRegime>& regimes) {
  if (regimes.empty()) throw std::invalid_argument("gen_mixed_samples: no regimes given");
  std::vector<BScanSample> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    SynthSpec s = base;
    s.regime = regimes[static_cast<std::size_t>(i) % regimes.size()];
    if (s.regime == ShadowRegime::MultipleClose) s.shadow_count = std::max(2, s.shadow_count);
    s.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    out.push_back(gen_sample(s));
  }
  return out;
}

void write_pgm(const fs::path& path, const std::vector<float>& image, int height, int width,
               const BoundaryProfile* overlay) {
  if (image.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("write_pgm: size mismatch");
  std::vector<unsigned char> px(image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  if (overlay) {
    for (int b = 0; b < overlay->num_boundaries; ++b)
      for (int x = 0; x < std::min(width, overlay->width); ++x) {
        if (!overlay->present(b, x)) continue;
        const long r = std::lround(overlay->at(b, x));
        if (r >= 0 && r < height) px[static_cast<std::size_t>(r) * width + x] = 255;
      }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace breaknet

#include "amt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace fs = std::filesystem;

namespace amt {

namespace {

uint64_t fnv1a(const unsigned char* p, size_t n) {
    uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Per-class radial frequency; distinct for every global class id.
double class_frequency(int64_t global_id) { return 1.6 + 0.17 * static_cast<double>(global_id); }

std::vector<float> render_sample(const SyntheticSpec& spec, int64_t global_id, Rng& rng) {
    const int64_t n = spec.image_size;
    const double half = static_cast<double>(n - 1) / 2.0;
    const double freq = class_frequency(global_id);

    const double phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter);
    const double amp = rng.uniform(0.85, 1.15);
    const double beta = rng.uniform(-0.3, 0.3);          // grating tilt, near horizontal
    const double grating_phase = rng.uniform(0.0, 6.283185307179586);
    const double grating_freq = rng.uniform(2.5, 3.5);

    std::vector<float> img(static_cast<size_t>(spec.channels * n * n));
    for (int64_t c = 0; c < spec.channels; ++c) {
        const double chan_shift = 0.7 * static_cast<double>(c);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t q = 0; q < n; ++q) {
                const double y = (static_cast<double>(r) - half) / half;
                const double x = (static_cast<double>(q) - half) / half;
                const double rad = std::sqrt(x * x + y * y);
                double v = amp * std::sin(6.283185307179586 * freq * rad + phase + chan_shift);
                v += spec.orientation_strength *
                     std::sin(6.283185307179586 * grating_freq *
                                  (y * std::cos(beta) + x * std::sin(beta)) +
                              grating_phase);
                v += 0.4 * y;  // vertical ramp: separates 180-degree rotations
                v += spec.noise * rng.normal();
                img[static_cast<size_t>((c * n + r) * n + q)] = static_cast<float>(v);
            }
    }
    return img;
}

void write_sample(const fs::path& path, const std::vector<float>& img) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("generate_synthetic: cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(img.data()),
              static_cast<std::streamsize>(img.size() * sizeof(float)));
    if (!out) throw std::runtime_error("generate_synthetic: write failed for '" + path.string() + "'");
}

}  // namespace

void generate_synthetic(const SyntheticSpec& spec, const std::string& dir) {
    require(spec.n_classes >= 2 && spec.samples_per_class >= 1 && spec.image_size >= 8 &&
                (spec.channels == 1 || spec.channels == 3),
            "generate_synthetic: invalid spec");
    fs::create_directories(dir);

    const int64_t px = spec.channels * spec.image_size * spec.image_size;
    std::vector<std::vector<double>> class_mean(
        static_cast<size_t>(spec.n_classes), std::vector<double>(static_cast<size_t>(px), 0.0));
    std::vector<double> chan_sum(static_cast<size_t>(spec.channels), 0.0);
    std::vector<double> chan_sumsq(static_cast<size_t>(spec.channels), 0.0);

    nlohmann::ordered_json manifest;
    manifest["split"] = spec.split;
    manifest["image"] = {{"channels", spec.channels},
                         {"height", spec.image_size},
                         {"width", spec.image_size}};
    auto& class_list = manifest["classes"] = nlohmann::ordered_json::array();

    const int64_t per_chan = spec.image_size * spec.image_size;
    for (int64_t k = 0; k < spec.n_classes; ++k) {
        const int64_t gid = spec.class_id_offset + k;
        Rng rng(Rng::mix(spec.seed, static_cast<uint64_t>(gid)));
        char cdir[32];
        std::snprintf(cdir, sizeof(cdir), "class_%03lld", static_cast<long long>(gid));
        fs::create_directories(fs::path(dir) / cdir);

        nlohmann::ordered_json entry;
        entry["id"] = gid;
        entry["dir"] = cdir;
        auto& files = entry["samples"] = nlohmann::ordered_json::array();
        auto& sums = entry["checksums"] = nlohmann::ordered_json::array();
        for (int64_t s = 0; s < spec.samples_per_class; ++s) {
            auto img = render_sample(spec, gid, rng);
            char fname[32];
            std::snprintf(fname, sizeof(fname), "s%04lld.bin", static_cast<long long>(s));
            write_sample(fs::path(dir) / cdir / fname, img);
            files.push_back(fname);
            sums.push_back(hex64(fnv1a(reinterpret_cast<const unsigned char*>(img.data()),
                                       img.size() * sizeof(float))));
            for (int64_t i = 0; i < px; ++i) {
                class_mean[k][i] += img[i] / static_cast<double>(spec.samples_per_class);
                chan_sum[i / per_chan] += img[i];
                chan_sumsq[i / per_chan] += static_cast<double>(img[i]) * img[i];
            }
        }
        class_list.push_back(std::move(entry));
    }

    // distinct classes must have separated mean images
    for (int64_t a = 0; a < spec.n_classes; ++a)
        for (int64_t b = a + 1; b < spec.n_classes; ++b) {
            double l2 = 0;
            for (int64_t i = 0; i < px; ++i) {
                const double d = class_mean[a][i] - class_mean[b][i];
                l2 += d * d;
            }
            require(std::sqrt(l2) > 1e-3,
                    "generate_synthetic: class means " + std::to_string(a) + " and " +
                        std::to_string(b) + " are not separated");
        }

    const double count = static_cast<double>(spec.n_classes * spec.samples_per_class * per_chan);
    std::vector<double> mean(static_cast<size_t>(spec.channels)), stddev(static_cast<size_t>(spec.channels));
    for (int64_t c = 0; c < spec.channels; ++c) {
        mean[c] = chan_sum[c] / count;
        stddev[c] = std::sqrt(std::max(1e-12, chan_sumsq[c] / count - mean[c] * mean[c]));
    }
    manifest["normalization"] = {{"mean", mean}, {"std", stddev}};

    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!out) throw std::runtime_error("generate_synthetic: cannot write manifest in '" + dir + "'");
    out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("load_dataset: cannot open '" + manifest_path + "'");
    nlohmann::json manifest = nlohmann::json::parse(in);

    Dataset ds;
    ds.split = manifest.at("split").get<std::string>();
    ds.channels = manifest.at("image").at("channels").get<int64_t>();
    ds.height = manifest.at("image").at("height").get<int64_t>();
    ds.width = manifest.at("image").at("width").get<int64_t>();
    ds.mean = manifest.at("normalization").at("mean").get<std::vector<double>>();
    ds.stddev = manifest.at("normalization").at("std").get<std::vector<double>>();
    require(static_cast<int64_t>(ds.mean.size()) == ds.channels &&
                static_cast<int64_t>(ds.stddev.size()) == ds.channels,
            "load_dataset: normalization stats do not match channel count");

    const fs::path root = fs::path(manifest_path).parent_path();
    const size_t px = static_cast<size_t>(ds.pixel_count());
    const int64_t per_chan = ds.height * ds.width;
    int64_t next_sample_id = 0;

    for (const auto& entry : manifest.at("classes")) {
        DatasetClass cls;
        cls.class_id = entry.at("id").get<int64_t>();
        const std::string cdir = entry.at("dir").get<std::string>();
        const auto& files = entry.at("samples");
        const auto& sums = entry.at("checksums");
        require(files.size() == sums.size(), "load_dataset: samples/checksums length mismatch");
        for (size_t i = 0; i < files.size(); ++i) {
            const fs::path fpath = root / cdir / files[i].get<std::string>();
            std::ifstream f(fpath, std::ios::binary);
            if (!f) throw std::runtime_error("load_dataset: missing file '" + fpath.string() + "'");
            std::vector<float> raw(px);
            f.read(reinterpret_cast<char*>(raw.data()),
                   static_cast<std::streamsize>(px * sizeof(float)));
            if (!f || f.gcount() != static_cast<std::streamsize>(px * sizeof(float)) ||
                f.peek() != EOF)
                throw std::runtime_error("load_dataset: shape mismatch in '" + fpath.string() + "'");
            const std::string want = sums[i].get<std::string>();
            const std::string got = hex64(
                fnv1a(reinterpret_cast<const unsigned char*>(raw.data()), px * sizeof(float)));
            if (want != got)
                throw std::runtime_error("load_dataset: checksum mismatch in '" + fpath.string() + "'");

            LoadedSample sample;
            sample.sample_id = next_sample_id++;
            sample.pixels.resize(px);
            for (size_t j = 0; j < px; ++j) {
                const int64_t c = static_cast<int64_t>(j) / per_chan;
                sample.pixels[j] = static_cast<float>((raw[j] - ds.mean[c]) / ds.stddev[c]);
            }
            cls.samples.push_back(std::move(sample));
        }
        ds.classes.push_back(std::move(cls));
    }
    return ds;
}

void check_disjoint_splits(const Dataset& base, const Dataset& novel) {
    std::set<int64_t> ids;
    for (const auto& c : base.classes) ids.insert(c.class_id);
    for (const auto& c : novel.classes)
        require(!ids.count(c.class_id), "splits share class id " + std::to_string(c.class_id));
}

std::vector<float> augment_sample(const std::vector<float>& pixels, int64_t channels,
                                  int64_t height, int64_t width, const AugmentConfig& cfg,
                                  Rng& rng) {
    std::vector<float> out = pixels;
    if (!cfg.enabled) return out;

    if (rng.uniform() < cfg.flip_prob) {
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t r = 0; r < height; ++r)
                for (int64_t q = 0; q < width / 2; ++q)
                    std::swap(out[(c * height + r) * width + q],
                              out[(c * height + r) * width + width - 1 - q]);
    }

    if (cfg.crop_pad > 0) {
        // random crop of the zero-padded image, i.e. a bounded 2-D shift
        const int64_t dy = rng.uniform_int(2 * cfg.crop_pad + 1) - cfg.crop_pad;
        const int64_t dx = rng.uniform_int(2 * cfg.crop_pad + 1) - cfg.crop_pad;
        if (dy != 0 || dx != 0) {
            std::vector<float> shifted(out.size(), 0.0f);
            for (int64_t c = 0; c < channels; ++c)
                for (int64_t r = 0; r < height; ++r) {
                    const int64_t sr = r + dy;
                    if (sr < 0 || sr >= height) continue;
                    for (int64_t q = 0; q < width; ++q) {
                        const int64_t sq = q + dx;
                        if (sq >= 0 && sq < width)
                            shifted[(c * height + r) * width + q] =
                                out[(c * height + sr) * width + sq];
                    }
                }
            out = std::move(shifted);
        }
    }

    if (channels == 3 && cfg.jitter_scale > 0) {
        for (int64_t c = 0; c < channels; ++c) {
            const float scale = static_cast<float>(1.0 + rng.uniform(-cfg.jitter_scale, cfg.jitter_scale));
            const float shift = static_cast<float>(rng.uniform(-cfg.jitter_scale, cfg.jitter_scale));
            for (int64_t i = 0; i < height * width; ++i) {
                out[c * height * width + i] = out[c * height * width + i] * scale + shift;
            }
        }
    }

    if (rng.uniform() < cfg.erase_prob) {
        const int64_t eh = 2 + rng.uniform_int(height / 3);
        const int64_t ew = 2 + rng.uniform_int(width / 3);
        const int64_t r0 = rng.uniform_int(height - eh + 1);
        const int64_t q0 = rng.uniform_int(width - ew + 1);
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t r = r0; r < r0 + eh; ++r)
                for (int64_t q = q0; q < q0 + ew; ++q)
                    out[(c * height + r) * width + q] = 0.0f;  // split mean after normalization
    }
    return out;
}

void export_embeddings(const Dataset& ds,
                       const std::function<std::vector<double>(const std::vector<float>&)>& embed,
                       const std::string& csv_path) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw std::runtime_error("export_embeddings: cannot write '" + csv_path + "'");
    bool header = false;
    for (const auto& cls : ds.classes)
        for (const auto& s : cls.samples) {
            const auto feat = embed(s.pixels);
            if (!header) {
                out << "sample_id,class_id";
                for (size_t i = 0; i < feat.size(); ++i) out << ",f" << i;
                out << "\n";
                header = true;
            }
            out << s.sample_id << "," << cls.class_id;
            char buf[32];
            for (double v : feat) {
                std::snprintf(buf, sizeof(buf), ",%.8g", v);
                out << buf;
            }
            out << "\n";
        }
}

}  // namespace amt

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "amt/data.hpp"

using namespace amt;
namespace fs = std::filesystem;

namespace {
fs::path fresh_dir(const char* tag) {
    auto p = fs::temp_directory_path() / (std::string("amt_data_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.n_classes = 10;
    s.samples_per_class = 50;
    s.image_size = 16;
    s.channels = 3;
    s.seed = 9;
    return s;
}
}  // namespace

TEST_CASE("generate: 10 classes x 50 samples -> 500 files plus manifest") {
    auto dir = fresh_dir("count");
    generate_synthetic(small_spec(), dir.string());
    CHECK(fs::exists(dir / "manifest.json"));
    int64_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.path().extension() == ".bin") files++;
    CHECK(files == 500);
}

TEST_CASE("generate: same seed twice is byte-identical") {
    auto d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
    generate_synthetic(small_spec(), d1.string());
    generate_synthetic(small_spec(), d2.string());
    for (const auto& e : fs::recursive_directory_iterator(d1)) {
        if (!e.is_regular_file()) continue;
        auto rel = fs::relative(e.path(), d1);
        std::ifstream a(e.path(), std::ios::binary), b(d2 / rel, std::ios::binary);
        REQUIRE(a.good());
        REQUIRE(b.good());
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }
}

TEST_CASE("round-trip preserves counts and normalizes per channel") {
    auto dir = fresh_dir("roundtrip");
    generate_synthetic(small_spec(), dir.string());
    auto ds = load_dataset((dir / "manifest.json").string());
    CHECK(ds.n_classes() == 10);
    CHECK(ds.total_samples() == 500);
    CHECK(ds.channels == 3);
    CHECK(ds.height == 16);

    // per-channel statistics of the normalized split: mean ~ 0, var ~ 1
    const int64_t per_chan = ds.height * ds.width;
    for (int64_t c = 0; c < ds.channels; ++c) {
        double sum = 0, sumsq = 0;
        int64_t n = 0;
        for (const auto& cls : ds.classes)
            for (const auto& s : cls.samples)
                for (int64_t i = 0; i < per_chan; ++i) {
                    const double v = s.pixels[static_cast<size_t>(c * per_chan + i)];
                    sum += v;
                    sumsq += v * v;
                    ++n;
                }
        const double mean = sum / n;
        const double var = sumsq / n - mean * mean;
        CHECK(std::abs(mean) < 0.05);
        CHECK(std::abs(var - 1.0) < 0.05);
    }
}

TEST_CASE("samples are orientation sensitive in expectation") {
    auto dir = fresh_dir("orient");
    generate_synthetic(small_spec(), dir.string());
    auto ds = load_dataset((dir / "manifest.json").string());
    // mean squared distance between a sample and its 90-degree rotation
    const int64_t n = ds.height;
    double total = 0;
    int64_t count = 0;
    for (const auto& cls : ds.classes)
        for (const auto& s : cls.samples) {
            double l2 = 0;
            for (int64_t c = 0; c < ds.channels; ++c)
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t q = 0; q < n; ++q) {
                        const double rot = s.pixels[(c * n + (n - 1 - q)) * n + r];
                        const double d = s.pixels[(c * n + r) * n + q] - rot;
                        l2 += d * d;
                    }
            total += l2 / static_cast<double>(ds.pixel_count());
            ++count;
        }
    CHECK(total / count > 0.05);
}

TEST_CASE("missing file is an error naming the file") {
    auto dir = fresh_dir("missing");
    generate_synthetic(small_spec(), dir.string());
    fs::remove(dir / "class_003" / "s0007.bin");
    CHECK_THROWS_WITH_AS(load_dataset((dir / "manifest.json").string()),
                         doctest::Contains("s0007.bin"), std::runtime_error);
}

TEST_CASE("corrupted file is a checksum error naming the file") {
    auto dir = fresh_dir("corrupt");
    generate_synthetic(small_spec(), dir.string());
    {
        std::fstream f(dir / "class_001" / "s0002.bin",
                       std::ios::binary | std::ios::in | std::ios::out);
        float poison = 1234.5f;
        f.write(reinterpret_cast<const char*>(&poison), sizeof(poison));
    }
    CHECK_THROWS_WITH_AS(load_dataset((dir / "manifest.json").string()),
                         doctest::Contains("s0002.bin"), std::runtime_error);
}

TEST_CASE("disjoint split validation") {
    auto dir = fresh_dir("disjoint");
    auto base = small_spec();
    auto novel = small_spec();
    novel.split = "novel";
    novel.class_id_offset = base.n_classes;  // disjoint ids
    generate_synthetic(base, (dir / "base").string());
    generate_synthetic(novel, (dir / "novel").string());
    auto b = load_dataset((dir / "base" / "manifest.json").string());
    auto v = load_dataset((dir / "novel" / "manifest.json").string());
    check_disjoint_splits(b, v);  // fine

    auto overlapping = small_spec();
    overlapping.split = "novel";
    overlapping.class_id_offset = base.n_classes - 1;
    generate_synthetic(overlapping, (dir / "bad").string());
    auto bad = load_dataset((dir / "bad" / "manifest.json").string());
    CHECK_THROWS_AS(check_disjoint_splits(b, bad), ContractViolation);
}

TEST_CASE("augmentations are deterministic under a fixed rng seed") {
    auto dir = fresh_dir("augdet");
    generate_synthetic(small_spec(), dir.string());
    auto ds = load_dataset((dir / "manifest.json").string());
    AugmentConfig cfg;
    const auto& px = ds.classes[0].samples[0].pixels;
    Rng r1(77), r2(77), r3(78);
    auto a = augment_sample(px, ds.channels, ds.height, ds.width, cfg, r1);
    auto b = augment_sample(px, ds.channels, ds.height, ds.width, cfg, r2);
    auto c = augment_sample(px, ds.channels, ds.height, ds.width, cfg, r3);
    CHECK(a == b);
    CHECK(a != c);

    AugmentConfig off;
    off.enabled = false;
    auto plain = augment_sample(px, ds.channels, ds.height, ds.width, off, r1);
    CHECK(plain == px);
}

TEST_CASE("embedding export: one row per sample, stable for identical inputs") {
    auto dir = fresh_dir("export");
    auto spec = small_spec();
    spec.n_classes = 3;
    spec.samples_per_class = 4;
    generate_synthetic(spec, dir.string());
    auto ds = load_dataset((dir / "manifest.json").string());

    auto fake_embed = [](const std::vector<float>& px) {
        double s0 = 0, s1 = 0;
        for (size_t i = 0; i < px.size(); ++i) (i % 2 ? s1 : s0) += px[i];
        return std::vector<double>{s0, s1};
    };
    const auto csv = (dir / "emb.csv").string();
    export_embeddings(ds, fake_embed, csv);

    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "sample_id,class_id,f0,f1");
    int64_t rows = 0;
    std::string first_payload, repeat_payload;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == ds.total_samples());

    // identical pixels produce identical rows apart from the ids
    export_embeddings(ds, fake_embed, csv);
    std::ifstream again(csv);
    std::getline(again, line);
    std::getline(again, first_payload);
    export_embeddings(ds, fake_embed, (dir / "emb2.csv").string());
    std::ifstream second((dir / "emb2.csv").string());
    std::getline(second, line);
    std::getline(second, repeat_payload);
    CHECK(first_payload == repeat_payload);
}

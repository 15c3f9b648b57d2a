#include "doctest.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "explora/analysis.hpp"
#include "explora/data.hpp"

using namespace explora;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
    static int counter = 0;
    std::string dir = (fs::temp_directory_path() / ("explora_data_" + std::to_string(::getpid()) + "_" +
                                                    tag + "_" + std::to_string(counter++)))
                          .string();
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_ppm(const std::string& path, int w, int h, uint8_t base) {
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < w * h * 3; ++i) out.put(static_cast<char>((base + i) % 256));
}

void write_pgm(const std::string& path, int w, int h) {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < w * h; ++i) out.put(static_cast<char>(i % 256));
}

SyntheticDomainSpec source_spec(uint64_t seed = 0) {
    SyntheticDomainSpec s;
    s.domain = "source_rgb";
    s.seed = seed;
    return s;
}

} // namespace

TEST_CASE("synthetic images are deterministic and class-balanced") {
    SyntheticDomainSpec spec = source_spec(5);
    int64_t l0 = -1, l1 = -1;
    Tensor a = synth_image(spec, 0, &l0);
    Tensor b = synth_image(spec, 0, &l1);
    CHECK(l0 == 0);
    CHECK(l0 == l1);
    CHECK(std::memcmp(a.bytes().data(), b.bytes().data(), a.bytes().size()) == 0);
    int64_t l5 = -1;
    (void)synth_image(spec, 5, &l5);
    CHECK(l5 == 5 % spec.classes);
}

TEST_CASE("target domain differs from source for identical indices") {
    SyntheticDomainSpec src = source_spec(7);
    SyntheticDomainSpec tgt = src;
    tgt.domain = "target_spectral";
    Tensor a = synth_image(src, 3);
    Tensor b = synth_image(tgt, 3);
    REQUIRE(a.shape() == b.shape());
    CHECK(std::memcmp(a.bytes().data(), b.bytes().data(), a.bytes().size()) != 0);
}

TEST_CASE("multi-spectral domain produces six channels") {
    SyntheticDomainSpec spec;
    spec.domain = "target_multispectral";
    spec.channels = 6;
    spec.seed = 1;
    Tensor img = synth_image(spec, 2);
    CHECK(img.shape() == Shape{6, 32, 32});
    SyntheticDomainSpec bad = spec;
    bad.channels = 3;
    CHECK_THROWS_AS((void)synth_image(bad, 0), ContractError);
}

TEST_CASE("gen_data is deterministic down to the shard bytes") {
    const std::string d1 = temp_dir("gen1");
    const std::string d2 = temp_dir("gen2");
    SyntheticDomainSpec spec = source_spec(42);
    (void)gen_data(spec, 8, 4, d1);
    (void)gen_data(spec, 8, 4, d2);
    CHECK(read_file(d1 + "/train.shard") == read_file(d2 + "/train.shard"));
    CHECK(read_file(d1 + "/val.shard") == read_file(d2 + "/val.shard"));
    CHECK(read_file(d1 + "/manifest.json") == read_file(d2 + "/manifest.json"));
}

TEST_CASE("gen_data respects EXPLORA_THREADS without changing output") {
    const std::string d1 = temp_dir("thr1");
    const std::string d2 = temp_dir("thr2");
    SyntheticDomainSpec spec = source_spec(43);
    unsetenv("EXPLORA_THREADS");
    (void)gen_data(spec, 9, 3, d1);
    setenv("EXPLORA_THREADS", "3", 1);
    (void)gen_data(spec, 9, 3, d2);
    unsetenv("EXPLORA_THREADS");
    CHECK(read_file(d1 + "/train.shard") == read_file(d2 + "/train.shard"));
}

TEST_CASE("load_split returns balanced labels and checks checksums") {
    const std::string dir = temp_dir("load");
    SyntheticDomainSpec spec = source_spec(44);
    DatasetManifest m = gen_data(spec, 12, 8, dir);
    CHECK(m.classes() == 4);
    Dataset train = load_split(dir, "train");
    CHECK(train.size() == 12);
    CHECK(train.classes == 4);
    std::vector<int64_t> counts(4, 0);
    for (int64_t y : train.labels) counts[static_cast<size_t>(y)]++;
    for (int64_t c : counts) CHECK(c == 3);

    CHECK_THROWS_AS((void)load_split(dir, "test"), DataError);

    // corrupt the shard: checksum must catch it
    std::string bytes = read_file(dir + "/val.shard");
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    std::ofstream(dir + "/val.shard", std::ios::binary) << bytes;
    CHECK_THROWS_AS((void)load_split(dir, "val"), DataError);
}

TEST_CASE("raw-pixel probe learns the source classes well above chance") {
    const std::string dir = temp_dir("probe");
    SyntheticDomainSpec spec = source_spec(45);
    (void)gen_data(spec, 160, 80, dir);
    Dataset train = load_split(dir, "train");
    Dataset val = load_split(dir, "val");
    Tensor xt, xv;
    {
        NoGrad ng;
        xt = ops::reshape(train.images, {train.size(), 3 * 32 * 32});
        xv = ops::reshape(val.images, {val.size(), 3 * 32 * 32});
    }
    ProbeConfig pc;
    pc.epochs = 60;
    ProbeHead head = train_logistic_head(xt, train.labels, xv, val.labels, train.classes, pc);
    // chance is 0.25 for four classes; require at least double
    CHECK(head.accuracy >= 0.5);
}

TEST_CASE("ingest_folder builds a manifest from class directories") {
    const std::string src = temp_dir("ppm_src");
    const std::string out = temp_dir("ppm_out");
    fs::create_directories(src + "/cat");
    fs::create_directories(src + "/dog");
    write_ppm(src + "/cat/a.ppm", 40, 40, 0);
    write_ppm(src + "/cat/b.ppm", 48, 36, 10);
    write_ppm(src + "/cat/c.ppm", 36, 48, 20);
    write_ppm(src + "/dog/a.ppm", 40, 40, 30);
    write_ppm(src + "/dog/b.ppm", 64, 32, 40);
    write_ppm(src + "/dog/c.ppm", 32, 64, 50);

    DatasetManifest m = ingest_folder(src, 32, out);
    CHECK(m.classes() == 2);
    Dataset all = load_split(out, "train");
    CHECK(all.size() == 6);
    CHECK(all.images.shape() == Shape{6, 3, 32, 32});
    std::vector<int64_t> counts(2, 0);
    for (int64_t y : all.labels) counts[static_cast<size_t>(y)]++;
    CHECK(counts[0] == 3);
    CHECK(counts[1] == 3);
    CHECK(all.label_names == std::vector<std::string>{"cat", "dog"});

    // idempotent re-ingestion: identical checksums
    const std::string out2 = temp_dir("ppm_out2");
    DatasetManifest m2 = ingest_folder(src, 32, out2);
    CHECK(m.doc.at("splits").at("train").at("checksum") ==
          m2.doc.at("splits").at("train").at("checksum"));
}

TEST_CASE("ingest_folder error paths") {
    const std::string empty = temp_dir("empty");
    const std::string out = temp_dir("err_out");
    CHECK_THROWS_AS((void)ingest_folder(empty, 32, out), DataError);

    const std::string mixed = temp_dir("mixed");
    fs::create_directories(mixed + "/x");
    write_ppm(mixed + "/x/rgb1.ppm", 40, 40, 0);
    write_ppm(mixed + "/x/rgb2.ppm", 40, 40, 9);
    write_pgm(mixed + "/x/gray.pgm", 40, 40);
    try {
        (void)ingest_folder(mixed, 32, out);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("gray.pgm") != std::string::npos);
    }
}

TEST_CASE("dataset batch gathers rows") {
    Dataset ds;
    Rng rng(46);
    ds.images = Tensor::randn({4, 1, 2, 2}, rng);
    ds.classes = 2;
    ds.labels = {0, 1, 0, 1};
    Tensor b = ds.batch({2, 0});
    CHECK(b.dim(0) == 2);
    for (int64_t i = 0; i < 4; ++i) CHECK(b.at(i) == ds.images.at(2 * 4 + i));
}

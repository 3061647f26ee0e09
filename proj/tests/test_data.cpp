#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <set>

#include "testutil.hpp"
#include "transop/dataset.hpp"
#include "transop/hash.hpp"
#include "transop/preprocess.hpp"
#include "transop/volume.hpp"

using namespace transop;

namespace {

Volume random_volume(int d, int w, int h, Rng& rng, double lo = 0.0, double hi = 80.0) {
    Volume v(d, w, h, 3.0, 1.0, 1.0);
    for (double& x : v.voxels) x = rng.uniform(lo, hi);
    return v;
}

uint64_t volume_hash(const Volume& v) {
    uint64_t h = fnv1a64(&v.d, sizeof v.d);
    h = fnv1a64(&v.w, sizeof v.w, h);
    h = fnv1a64(&v.h, sizeof v.h, h);
    return fnv1a64(v.voxels.data(), v.voxels.size() * sizeof(double), h);
}

} // namespace

TEST_CASE("resample identity at target spacing") {
    Rng rng(1);
    Volume v = random_volume(10, 12, 14, rng);
    Volume r = resample(v);
    REQUIRE(r.d == 10);
    REQUIRE(r.w == 12);
    REQUIRE(r.h == 14);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(r.voxels[i] == v.voxels[i]);
}

TEST_CASE("resample grid arithmetic") {
    Volume v(50, 20, 20, 5.0, 1.0, 1.0);
    Volume r = resample(v);
    REQUIRE(r.d == 83); // round(50*5/3)
    REQUIRE(r.sd == 3.0);
}

TEST_CASE("resample keeps constants constant") {
    Volume v(9, 11, 7, 2.0, 1.5, 0.8);
    for (double& x : v.voxels) x = 17.25;
    Volume r = resample(v);
    for (double x : r.voxels) REQUIRE(std::fabs(x - 17.25) < 1e-10);
}

TEST_CASE("clip_hu bounds") {
    Volume v(1, 1, 3);
    v.voxels = {120.0, -5.0, 40.0};
    Volume c = clip_hu(v);
    REQUIRE(c.voxels[0] == 80.0);
    REQUIRE(c.voxels[1] == 0.0);
    REQUIRE(c.voxels[2] == 40.0);

    Volume cc = clip_hu(c);
    for (size_t i = 0; i < c.size(); ++i) REQUIRE(cc.voxels[i] == c.voxels[i]);

    REQUIRE_THROWS_AS(clip_hu(v, 80.0, 0.0), ConfigError);
}

TEST_CASE("strip_skull keeps the phantom ball") {
    // soft ball (HU 30) inside a saturated shell (HU 80) on zero background
    const int n = 32;
    Volume v(n, n, n);
    std::vector<uint8_t> truth(v.size(), 0);
    double c = (n - 1) / 2.0;
    for (int d = 0; d < n; ++d)
        for (int w = 0; w < n; ++w)
            for (int h = 0; h < n; ++h) {
                double r = std::sqrt((d - c) * (d - c) + (w - c) * (w - c) + (h - c) * (h - c));
                if (r <= 9.0) {
                    v.at(d, w, h) = 30.0;
                    truth[v.idx(d, w, h)] = 1;
                } else if (r <= 12.0) {
                    v.at(d, w, h) = 80.0;
                }
            }
    std::vector<uint8_t> mask = strip_skull_mask(v);
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        inter += (mask[i] && truth[i]) ? 1 : 0;
        uni += (mask[i] || truth[i]) ? 1 : 0;
    }
    double iou = static_cast<double>(inter) / static_cast<double>(uni);
    REQUIRE(iou > 0.9);

    Volume s = strip_skull(v);
    for (int d = 0; d < n; ++d)
        for (int w = 0; w < n; ++w)
            for (int h = 0; h < n; ++h) {
                double r = std::sqrt((d - c) * (d - c) + (w - c) * (w - c) + (h - c) * (h - c));
                if (r > 12.0) REQUIRE(s.at(d, w, h) == 0.0); // background stays zeroed
                if (r > 9.5 && r <= 12.0) REQUIRE(s.at(d, w, h) == 0.0); // shell stripped
            }
}

TEST_CASE("strip_skull on uniform in-range volume is identity") {
    Volume v(6, 7, 8);
    for (double& x : v.voxels) x = 40.0;
    Volume s = strip_skull(v);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(s.voxels[i] == 40.0);
}

TEST_CASE("strip_skull rejects empty mask") {
    Volume v(4, 4, 4); // all zeros: nothing strictly inside (0,80)
    REQUIRE_THROWS_AS(strip_skull(v), DegenerateInputError);
}

TEST_CASE("center_crop_pad arithmetic") {
    Rng rng(5);
    Volume v = random_volume(40, 200, 140, rng);
    Volume c = center_crop_pad(v);
    REQUIRE(c.d == 32);
    REQUIRE(c.w == 192);
    REQUIRE(c.h == 128);
    // trimmed 4/4, 4/4, 6/6 per side
    REQUIRE(c.at(0, 0, 0) == v.at(4, 4, 6));
    REQUIRE(c.at(31, 191, 127) == v.at(35, 195, 133));

    Volume exact = random_volume(32, 192, 128, rng);
    Volume ce = center_crop_pad(exact);
    for (size_t i = 0; i < exact.size(); ++i) REQUIRE(ce.voxels[i] == exact.voxels[i]);

    Volume small = random_volume(20, 192, 128, rng);
    Volume cp = center_crop_pad(small);
    REQUIRE(cp.d == 32);
    for (int w = 0; w < 192; w += 37)
        for (int h = 0; h < 128; h += 19) {
            REQUIRE(cp.at(0, w, h) == 0.0);
            REQUIRE(cp.at(5, w, h) == 0.0);
            REQUIRE(cp.at(25, w, h) == small.at(20 - 1, w, h));
            REQUIRE(cp.at(26, w, h) == 0.0);
            REQUIRE(cp.at(31, w, h) == 0.0);
        }
    REQUIRE(cp.at(6, 10, 10) == small.at(0, 10, 10));
}

TEST_CASE("normalize z-scores per volume") {
    Rng rng(7);
    Volume v = random_volume(8, 9, 10, rng);
    Volume n = normalize(v);
    double mu = 0;
    for (double x : n.voxels) mu += x;
    mu /= static_cast<double>(n.size());
    REQUIRE(std::fabs(mu) < 1e-10);
    double var = 0;
    for (double x : n.voxels) var += (x - mu) * (x - mu);
    double sd = std::sqrt(var / static_cast<double>(n.size()));
    REQUIRE(std::fabs(sd - 1.0) < 1e-6);

    // idempotent
    Volume n2 = normalize(n);
    for (size_t i = 0; i < n.size(); ++i) REQUIRE(std::fabs(n2.voxels[i] - n.voxels[i]) < 1e-10);

    // constant volume -> zeros
    Volume c(3, 3, 3);
    for (double& x : c.voxels) x = 5.0;
    Volume nc = normalize(c);
    for (double x : nc.voxels) REQUIRE(x == 0.0);

    // affine invariance
    Volume a = v;
    for (double& x : a.voxels) x = 2.5 * x + 7.0;
    Volume na = normalize(a);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(std::fabs(na.voxels[i] - n.voxels[i]) < 1e-9);
}

TEST_CASE("augment flips are involutions and noise is calibrated") {
    Rng rng(11);
    Volume v = random_volume(10, 11, 12, rng);
    {
        Rng r1(3), r2(4);
        Volume once = augment(v, r1, 1.0, 0.0);
        Volume twice = augment(once, r2, 1.0, 0.0);
        for (size_t i = 0; i < v.size(); ++i) REQUIRE(twice.voxels[i] == v.voxels[i]);
    }
    {
        Rng r1(42), r2(42);
        Volume a = augment(v, r1);
        Volume b = augment(v, r2);
        for (size_t i = 0; i < v.size(); ++i) REQUIRE(a.voxels[i] == b.voxels[i]);
    }
    {
        Volume big = random_volume(50, 50, 40, rng); // 1e5 voxels
        Rng r(99);
        Volume a = augment(big, r, 0.0, 0.05);
        double mu = 0;
        for (size_t i = 0; i < big.size(); ++i) mu += a.voxels[i] - big.voxels[i];
        mu /= static_cast<double>(big.size());
        double var = 0;
        for (size_t i = 0; i < big.size(); ++i) {
            double d = a.voxels[i] - big.voxels[i] - mu;
            var += d * d;
        }
        double sd = std::sqrt(var / static_cast<double>(big.size()));
        REQUIRE(sd >= 0.049);
        REQUIRE(sd <= 0.051);
    }
}

namespace {

std::vector<ClinicalRecord> fake_records(int n, int n_bad) {
    std::vector<ClinicalRecord> recs;
    for (int i = 0; i < n; ++i) {
        ClinicalRecord r;
        r.patient_id = "p" + std::to_string(1000 + i);
        r.features = {static_cast<double>(i)};
        r.mrs = i < n_bad ? 4 : 1;
        recs.push_back(r);
    }
    return recs;
}

} // namespace

TEST_CASE("split_dataset proportions and disjointness") {
    auto recs = fake_records(500, 165);
    DatasetSplit s = split_dataset(recs, 7);
    REQUIRE(s.train.size() == 350);
    REQUIRE(s.val.size() == 75);
    REQUIRE(s.test.size() == 75);
    std::set<std::string> all;
    for (const auto* part : {&s.train, &s.val, &s.test})
        for (const auto& id : *part) REQUIRE(all.insert(id).second); // disjoint
    REQUIRE(all.size() == 500);

    // stratification: both classes everywhere
    std::set<std::string> bad_ids;
    for (const auto& r : recs)
        if (r.bad_outcome()) bad_ids.insert(r.patient_id);
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        size_t nbad = 0;
        for (const auto& id : *part) nbad += bad_ids.count(id);
        REQUIRE(nbad > 0);
        REQUIRE(nbad < part->size());
    }

    // reproducible
    DatasetSplit s2 = split_dataset(recs, 7);
    REQUIRE(s2.train == s.train);
    REQUIRE(s2.val == s.val);
    REQUIRE(s2.test == s.test);
    DatasetSplit s3 = split_dataset(recs, 8);
    REQUIRE(s3.train != s.train);
}

TEST_CASE("split_dataset largest-remainder rounding at n=20") {
    auto recs = fake_records(20, 6);
    DatasetSplit s = split_dataset(recs, 3);
    REQUIRE(s.train.size() == 14);
    REQUIRE(s.val.size() == 3);
    REQUIRE(s.test.size() == 3);
}

TEST_CASE("split_dataset errors") {
    REQUIRE_THROWS_AS(split_dataset(fake_records(9, 3), 1), ContractError);
    // a single bad case cannot appear in all three splits
    REQUIRE_THROWS_AS(split_dataset(fake_records(20, 1), 1), StratificationError);
}

TEST_CASE("svl round trip is bit exact") {
    TempDir tmp;
    Rng rng(13);
    Volume v = random_volume(5, 6, 7, rng);
    for (double& x : v.voxels) x = static_cast<double>(static_cast<float>(x));
    std::string path = tmp.sub("v.svl");
    write_svl(path, v);
    Volume r = read_svl(path);
    REQUIRE(r.d == v.d);
    REQUIRE(r.w == v.w);
    REQUIRE(r.h == v.h);
    REQUIRE(r.sd == v.sd);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(r.voxels[i] == v.voxels[i]);
}

TEST_CASE("svl format errors carry byte offsets") {
    TempDir tmp;
    {
        std::ofstream out(tmp.sub("bad_magic.svl"), std::ios::binary);
        out << "NOPE" << std::string(60, '\0');
    }
    try {
        read_svl(tmp.sub("bad_magic.svl"));
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("magic") != std::string::npos);
    }

    {
        Volume v(2, 2, 2);
        write_svl(tmp.sub("trunc.svl"), v);
        std::filesystem::resize_file(tmp.sub("trunc.svl"), 30); // header + partial payload
    }
    REQUIRE_THROWS_AS(read_svl(tmp.sub("trunc.svl")), FormatError);

    {
        Volume v(2, 2, 2);
        write_svl(tmp.sub("extra.svl"), v);
        std::ofstream out(tmp.sub("extra.svl"), std::ios::binary | std::ios::app);
        out << "x";
    }
    REQUIRE_THROWS_AS(read_svl(tmp.sub("extra.svl")), FormatError);
}

TEST_CASE("clinical csv round trip and validation") {
    TempDir tmp;
    auto recs = fake_records(12, 4);
    recs[0].features = {1.25e-7};
    write_clinical_csv(tmp.sub("c.csv"), {"f0"}, recs);
    ClinicalTable t = read_clinical_csv(tmp.sub("c.csv"));
    REQUIRE(t.feature_names == std::vector<std::string>{"f0"});
    REQUIRE(t.records.size() == 12);
    REQUIRE(t.records[0].features[0] == 1.25e-7);
    REQUIRE(t.records[3].mrs == 4);

    {
        std::ofstream out(tmp.sub("bad.csv"));
        out << "patient_id,f0,mrs\np1,oops,2\n";
    }
    REQUIRE_THROWS_AS(read_clinical_csv(tmp.sub("bad.csv")), DataError);
    {
        std::ofstream out(tmp.sub("bad2.csv"));
        out << "patient_id,f0,mrs\np1,1.5,9\n";
    }
    REQUIRE_THROWS_AS(read_clinical_csv(tmp.sub("bad2.csv")), DataError);
    {
        std::ofstream out(tmp.sub("bad3.csv"));
        out << "patient_id,f0,mrs\np1,,2\n";
    }
    REQUIRE_THROWS_AS(read_clinical_csv(tmp.sub("bad3.csv")), DataError);
}

TEST_CASE("synthetic generator determinism and prevalence") {
    SynthOptions o;
    o.n = 1000;
    o.seed = 21;
    SynthDataset a = synth_generate(o);
    SynthDataset b = synth_generate(o);
    REQUIRE(a.records.size() == 1000);
    uint64_t ha = 0xcbf29ce484222325ull, hb = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < a.volumes.size(); ++i) {
        ha = fnv1a64(a.volumes[i].voxels.data(), a.volumes[i].voxels.size() * 8, ha);
        hb = fnv1a64(b.volumes[i].voxels.data(), b.volumes[i].voxels.size() * 8, hb);
    }
    REQUIRE(ha == hb);

    size_t bad = 0;
    for (const auto& r : a.records) bad += r.bad_outcome() ? 1 : 0;
    double frac = static_cast<double>(bad) / 1000.0;
    REQUIRE(frac > 0.29);
    REQUIRE(frac < 0.37);
}

TEST_CASE("synthetic lesion size grows with severity") {
    double mean_hi = 0, mean_lo = 0;
    for (uint64_t s = 0; s < 100; ++s) {
        size_t hi = 0, lo = 0;
        Rng r1(mix_seed({s, 1}));
        Rng r2(mix_seed({s, 1})); // same stream: isolate the u effect
        synth_volume(8, 24, 16, 1.0, r1, &hi);
        synth_volume(8, 24, 16, 0.7, r2, &lo);
        mean_hi += static_cast<double>(hi);
        mean_lo += static_cast<double>(lo);
    }
    REQUIRE(mean_hi / 100.0 > mean_lo / 100.0);
}

TEST_CASE("synth_generate input guards") {
    SynthOptions o;
    o.n = 5;
    REQUIRE_THROWS_AS(synth_generate(o), ContractError);
    o.n = 20;
    o.d = 4;
    REQUIRE_THROWS_AS(synth_generate(o), ConfigError);
}

TEST_CASE("preprocess chain is deterministic and hits target dims") {
    SynthOptions o;
    o.n = 10;
    o.seed = 5;
    SynthDataset ds = synth_generate(o);
    PreprocessOptions po;
    po.crop_d = 8;
    po.crop_w = 24;
    po.crop_h = 16;
    Volume p1 = preprocess(ds.volumes[0], po);
    Volume p2 = preprocess(ds.volumes[0], po);
    REQUIRE(volume_hash(p1) == volume_hash(p2));
    REQUIRE(p1.d == 8);
    REQUIRE(p1.w == 24);
    REQUIRE(p1.h == 16);
    double mu = 0;
    for (double x : p1.voxels) mu += x;
    REQUIRE(std::fabs(mu / static_cast<double>(p1.size())) < 1e-10);
}

TEST_CASE("dataset directory round trip") {
    TempDir tmp;
    SynthOptions o;
    o.n = 12;
    o.seed = 9;
    SynthDataset ds = synth_generate(o);
    DatasetSplit split = split_dataset(ds.records, o.seed);
    write_dataset_dir(tmp.str(), ds, split);
    Dataset loaded = load_dataset_dir(tmp.str());
    REQUIRE(loaded.records.size() == 12);
    REQUIRE(loaded.volumes[3].voxels == ds.volumes[3].voxels);
    DatasetSplit split2 = read_split_manifest(tmp.sub("split.json"));
    REQUIRE(split2.train == split.train);
    REQUIRE(split2.seed == split.seed);
}

TEST_CASE("feature stats z-scoring") {
    Dataset ds;
    for (int i = 0; i < 4; ++i) {
        ClinicalRecord r;
        r.patient_id = "p" + std::to_string(i);
        r.features = {static_cast<double>(i), 2.0};
        r.mrs = 0;
        ds.by_id.emplace(r.patient_id, ds.records.size());
        ds.records.push_back(r);
    }
    FeatureStats st = feature_stats(ds, {"p0", "p1", "p2", "p3"});
    REQUIRE(st.mean[0] == Catch::Approx(1.5));
    REQUIRE(st.mean[1] == Catch::Approx(2.0));
    REQUIRE(st.stdev[1] == Catch::Approx(1e-8)); // floored
}

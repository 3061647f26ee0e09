#pragma once

// Clinical records, the stratified 70/15/15 split, dataset directory I/O and
// the synthetic multimodal generator standing in for the private cohort.
//
// A dataset directory holds: <patient_id>.svl volumes, clinical.csv
// (patient_id,<features...>,mrs) and split.json (ids per split + seed).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "transop/error.hpp"
#include "transop/rng.hpp"
#include "transop/volume.hpp"

namespace transop {

struct ClinicalRecord {
    std::string patient_id;
    std::vector<double> features;
    int mrs = 0; // 0..6

    bool bad_outcome() const { return mrs > 2; } // mRS > 2 = class 1
};

struct DatasetSplit {
    std::vector<std::string> train, val, test;
    uint64_t seed = 0;

    const std::vector<std::string>& ids(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
    }
};

// ---- clinical table ---------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_clinical_csv(const std::string& path, const std::vector<std::string>& feature_names,
                               const std::vector<ClinicalRecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write clinical table: " + path);
    out << "patient_id";
    for (const auto& n : feature_names) out << "," << n;
    out << ",mrs\n";
    for (const auto& r : records) {
        if (r.features.size() != feature_names.size())
            throw DataError("record " + r.patient_id + " has " + std::to_string(r.features.size()) +
                            " features, header names " + std::to_string(feature_names.size()));
        out << r.patient_id;
        for (double f : r.features) out << "," << format_double(f);
        out << "," << r.mrs << "\n";
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

inline double parse_cell(const std::string& s, const std::string& where) {
    if (s.empty()) throw DataError(where + ": missing value");
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw DataError(where + ": not a number: " + s);
    }
    if (pos != s.size()) throw DataError(where + ": not a number: " + s);
    return v;
}

} // namespace detail

struct ClinicalTable {
    std::vector<std::string> feature_names;
    std::vector<ClinicalRecord> records;
};

inline ClinicalTable read_clinical_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open clinical table: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    std::vector<std::string> header = detail::split_csv_line(line);
    if (header.size() < 3 || header.front() != "patient_id" || header.back() != "mrs")
        throw DataError(path + ": header must be patient_id,<features...>,mrs");
    ClinicalTable t;
    t.feature_names.assign(header.begin() + 1, header.end() - 1);
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells = detail::split_csv_line(line);
        std::string where = path + ":" + std::to_string(lineno);
        if (cells.size() != header.size())
            throw DataError(where + ": expected " + std::to_string(header.size()) + " cells, got " +
                            std::to_string(cells.size()));
        ClinicalRecord r;
        r.patient_id = cells.front();
        if (r.patient_id.empty()) throw DataError(where + ": empty patient_id");
        for (size_t i = 1; i + 1 < cells.size(); ++i)
            r.features.push_back(detail::parse_cell(cells[i], where));
        double mrs = detail::parse_cell(cells.back(), where);
        r.mrs = static_cast<int>(mrs);
        if (r.mrs != mrs || r.mrs < 0 || r.mrs > 6)
            throw DataError(where + ": mrs must be an integer in [0,6], got " + cells.back());
        t.records.push_back(std::move(r));
    }
    return t;
}

// ---- split manifest ------------------------------------------------------------

inline void write_split_manifest(const std::string& path, const DatasetSplit& s) {
    nlohmann::json j;
    j["seed"] = s.seed;
    j["train"] = s.train;
    j["val"] = s.val;
    j["test"] = s.test;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write split manifest: " + path);
    out << j.dump(2) << "\n";
}

inline DatasetSplit read_split_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    DatasetSplit s;
    try {
        s.seed = j.at("seed").get<uint64_t>();
        s.train = j.at("train").get<std::vector<std::string>>();
        s.val = j.at("val").get<std::vector<std::string>>();
        s.test = j.at("test").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return s;
}

// ---- stratified split ------------------------------------------------------------

namespace detail {

// Largest-remainder apportionment of n into parts proportional to props.
inline std::vector<size_t> largest_remainder(size_t n, const std::vector<double>& props) {
    std::vector<size_t> out(props.size());
    std::vector<std::pair<double, size_t>> rema(props.size());
    size_t assigned = 0;
    for (size_t i = 0; i < props.size(); ++i) {
        double q = static_cast<double>(n) * props[i];
        out[i] = static_cast<size_t>(std::floor(q));
        rema[i] = {q - std::floor(q), i};
        assigned += out[i];
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (size_t k = 0; assigned < n; ++k, ++assigned) out[rema[k % rema.size()].second]++;
    return out;
}

} // namespace detail

// Stratified 70/15/15 split by dichotomized outcome. Split totals follow
// largest-remainder rounding of n; within those totals each class is seeded
// with one sample per split and the rest assigned greedily toward the class
// quotas. Errors if either class cannot reach every split.
inline DatasetSplit split_dataset(const std::vector<ClinicalRecord>& records, uint64_t seed) {
    if (records.size() < 10) throw ContractError("split_dataset: need at least 10 records");
    const std::vector<double> props = {0.70, 0.15, 0.15};
    const char* names[3] = {"train", "val", "test"};
    std::vector<size_t> totals = detail::largest_remainder(records.size(), props);

    std::vector<std::string> strata[2]; // 0 = good, 1 = bad
    for (const auto& r : records) strata[r.bad_outcome() ? 1 : 0].push_back(r.patient_id);
    Rng rng(mix_seed({seed, 0x5114ull}));
    rng.shuffle(strata[0]);
    rng.shuffle(strata[1]);

    size_t alloc[2][3] = {};
    size_t load[3] = {};
    for (int c = 0; c < 2; ++c) {
        if (strata[c].size() < 3)
            throw StratificationError(std::string("split_dataset: class ") + (c ? "bad" : "good") +
                                      " has only " + std::to_string(strata[c].size()) +
                                      " samples, cannot cover every split");
        for (int s = 0; s < 3; ++s) {
            alloc[c][s] = 1;
            load[s] += 1;
        }
    }
    for (int s = 0; s < 3; ++s)
        if (load[s] > totals[static_cast<size_t>(s)])
            throw StratificationError(std::string("split_dataset: split ") + names[s] +
                                      " too small to hold both classes");
    size_t remaining[2] = {strata[0].size() - 3, strata[1].size() - 3};
    while (remaining[0] > 0 || remaining[1] > 0) {
        // most under-quota (class, split) with free capacity and stock left
        double best = -1e300;
        int bc = -1, bs = -1;
        for (int s = 0; s < 3; ++s) {
            if (load[s] >= totals[static_cast<size_t>(s)]) continue;
            for (int c = 0; c < 2; ++c) {
                if (remaining[c] == 0) continue;
                double deficit = static_cast<double>(strata[c].size()) * props[static_cast<size_t>(s)] -
                                 static_cast<double>(alloc[c][s]);
                if (deficit > best) {
                    best = deficit;
                    bc = c;
                    bs = s;
                }
            }
        }
        alloc[bc][bs]++;
        load[bs]++;
        remaining[bc]--;
    }

    DatasetSplit out;
    out.seed = seed;
    std::vector<std::string>* splits[3] = {&out.train, &out.val, &out.test};
    for (int c = 0; c < 2; ++c) {
        size_t at = 0;
        for (int s = 0; s < 3; ++s)
            for (size_t k = 0; k < alloc[c][s]; ++k) splits[s]->push_back(strata[c][at++]);
    }
    for (int s = 0; s < 3; ++s) std::sort(splits[s]->begin(), splits[s]->end());
    return out;
}

// ---- synthetic generator -----------------------------------------------------------

struct SynthOptions {
    int n = 500;
    int d = 8, w = 24, h = 16;
    int clinical_dim = 10;
    uint64_t seed = 1;
};

struct SynthDataset {
    std::vector<std::string> feature_names;
    std::vector<ClinicalRecord> records;
    std::vector<Volume> volumes; // parallel to records, raw (pre-preprocessing) HU
};

namespace detail {

// Smooth correlated noise field: white noise blurred twice per axis with a
// [1,2,1]/4 kernel, then rescaled to unit std.
inline std::vector<double> smooth_noise(int d, int w, int h, Rng& rng) {
    std::vector<double> f(static_cast<size_t>(d) * w * h);
    for (double& x : f) x = rng.normal();
    auto at = [&](int dd, int ww, int hh) -> size_t {
        return (static_cast<size_t>(dd) * w + ww) * h + hh;
    };
    std::vector<double> tmp(f.size());
    for (int pass = 0; pass < 2; ++pass) {
        for (int axis = 0; axis < 3; ++axis) {
            for (int dd = 0; dd < d; ++dd)
                for (int ww = 0; ww < w; ++ww)
                    for (int hh = 0; hh < h; ++hh) {
                        int lo[3] = {dd, ww, hh}, hi[3] = {dd, ww, hh};
                        lo[axis] = std::max(lo[axis] - 1, 0);
                        int lim = axis == 0 ? d : axis == 1 ? w : h;
                        hi[axis] = std::min(hi[axis] + 1, lim - 1);
                        tmp[at(dd, ww, hh)] = 0.25 * f[at(lo[0], lo[1], lo[2])] +
                                              0.5 * f[at(dd, ww, hh)] +
                                              0.25 * f[at(hi[0], hi[1], hi[2])];
                    }
            f.swap(tmp);
        }
    }
    double mu = 0, var = 0;
    for (double x : f) mu += x;
    mu /= static_cast<double>(f.size());
    for (double x : f) var += (x - mu) * (x - mu);
    double sd = std::sqrt(var / static_cast<double>(f.size()));
    if (sd > 1e-12)
        for (double& x : f) x = (x - mu) / sd;
    return f;
}

} // namespace detail

// One synthetic head phantom. Brain ellipsoid of soft tissue (~35 HU) with a
// saturating shell (stripped by preprocessing) on zero background, plus an
// ellipsoidal hypointense lesion whose size and contrast grow with u_img.
// Returns the number of lesion voxels through *lesion_voxels if non-null.
inline Volume synth_volume(int d, int w, int h, double u_img, Rng& rng,
                           size_t* lesion_voxels = nullptr) {
    Volume v(d, w, h, 3.0, 1.0, 1.0);
    std::vector<double> noise = detail::smooth_noise(d, w, h, rng);
    const double cx = (d - 1) / 2.0, cy = (w - 1) / 2.0, cz = (h - 1) / 2.0;
    const double bd = 0.40 * d, bw = 0.40 * w, bh = 0.40 * h; // brain semi-axes
    // lesion center sits well inside the brain
    const double lx = cx + (rng.uniform() - 0.5) * 0.5 * bd;
    const double ly = cy + (rng.uniform() - 0.5) * 0.5 * bw;
    const double lz = cz + (rng.uniform() - 0.5) * 0.5 * bh;
    const double lesion_scale = 0.20 + 0.30 * u_img;
    const double ld = std::max(1.0, lesion_scale * bd);
    const double lw = std::max(1.0, lesion_scale * bw);
    const double lh = std::max(1.0, lesion_scale * bh);
    const double contrast = 4.5 + 10.0 * u_img;
    size_t lesion_count = 0;
    for (int dd = 0; dd < d; ++dd)
        for (int ww = 0; ww < w; ++ww)
            for (int hh = 0; hh < h; ++hh) {
                double rb = std::pow((dd - cx) / bd, 2) + std::pow((ww - cy) / bw, 2) +
                            std::pow((hh - cz) / bh, 2);
                double val = 0.0;
                if (rb <= 1.0) {
                    val = 35.0 + 5.0 * noise[v.idx(dd, ww, hh)];
                    double rl = std::pow((dd - lx) / ld, 2) + std::pow((ww - ly) / lw, 2) +
                                std::pow((hh - lz) / lh, 2);
                    if (rl <= 1.0) {
                        val -= contrast;
                        ++lesion_count;
                    }
                    val = std::clamp(val, 2.0, 78.0);
                } else if (rb <= 1.35) {
                    val = 100.0; // skull shell, clipped to the upper HU bound
                }
                // snap to f32 so SVL1 round trips are exact
                v.at(dd, ww, hh) = static_cast<double>(static_cast<float>(val));
            }
    if (lesion_voxels) *lesion_voxels = lesion_count;
    return v;
}

// Informative clinical features are monotone transforms of u_clin plus noise;
// the rest are pure noise.
inline std::vector<double> synth_features(double u_clin, int dim, Rng& rng) {
    std::vector<double> f(static_cast<size_t>(dim));
    int informative = dim / 2;
    for (int j = 0; j < dim; ++j) {
        if (j < informative) {
            double base = 0.0;
            switch (j % 5) {
                case 0: base = u_clin; break;
                case 1: base = u_clin * u_clin; break;
                case 2: base = std::sqrt(u_clin); break;
                case 3: base = 1.0 - u_clin; break;
                default: base = u_clin * u_clin * u_clin; break;
            }
            f[static_cast<size_t>(j)] = base + 0.80 * rng.normal();
        } else {
            f[static_cast<size_t>(j)] = rng.normal();
        }
    }
    return f;
}

// Latent severity u ~ U(0,1); label is bad iff u > 0.67 (~33% prevalence).
// Image and clinical channels see independently corrupted copies of u.
inline SynthDataset synth_generate(const SynthOptions& o) {
    if (o.n < 10) throw ContractError("synth_generate: need n >= 10");
    if (o.d < 8 || o.w < 8 || o.h < 8)
        throw ConfigError("synth_generate: dims must each be >= 8");
    if (o.clinical_dim < 2) throw ConfigError("synth_generate: clinical_dim must be >= 2");
    SynthDataset ds;
    for (int j = 0; j < o.clinical_dim; ++j)
        ds.feature_names.push_back("f" + std::to_string(j));
    for (int i = 0; i < o.n; ++i) {
        Rng rng(mix_seed({o.seed, static_cast<uint64_t>(i), 0x5e9dull}));
        double u = rng.uniform();
        bool bad = u > 0.67;
        double u_img = std::clamp(u + rng.normal(0.0, 0.15), 0.0, 1.0);
        double u_clin = std::clamp(u + rng.normal(0.0, 0.15), 0.0, 1.0);
        ClinicalRecord r;
        char buf[16];
        std::snprintf(buf, sizeof buf, "p%04d", i);
        r.patient_id = buf;
        r.mrs = bad ? 3 + static_cast<int>(rng.below(4)) : static_cast<int>(rng.below(3));
        r.features = synth_features(u_clin, o.clinical_dim, rng);
        ds.volumes.push_back(synth_volume(o.d, o.w, o.h, u_img, rng));
        ds.records.push_back(std::move(r));
    }
    return ds;
}

// ---- dataset directory ------------------------------------------------------------

struct Dataset {
    std::vector<std::string> feature_names;
    std::vector<ClinicalRecord> records;
    std::vector<Volume> volumes; // parallel to records
    std::unordered_map<std::string, size_t> by_id;

    size_t index_of(const std::string& id) const {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("patient id not in dataset: " + id);
        return it->second;
    }
};

inline void write_dataset_dir(const std::string& dir, const SynthDataset& ds,
                              const DatasetSplit& split) {
    std::filesystem::create_directories(dir);
    write_clinical_csv(dir + "/clinical.csv", ds.feature_names, ds.records);
    write_split_manifest(dir + "/split.json", split);
    for (size_t i = 0; i < ds.records.size(); ++i)
        write_svl(dir + "/" + ds.records[i].patient_id + ".svl", ds.volumes[i]);
}

inline Dataset load_dataset_dir(const std::string& dir) {
    ClinicalTable t = read_clinical_csv(dir + "/clinical.csv");
    Dataset ds;
    ds.feature_names = std::move(t.feature_names);
    ds.records = std::move(t.records);
    ds.volumes.reserve(ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
        ds.volumes.push_back(read_svl(dir + "/" + ds.records[i].patient_id + ".svl"));
        ds.by_id.emplace(ds.records[i].patient_id, i);
    }
    return ds;
}

// Per-feature mean/std over the given record indices (train split), with a
// std floor; applied to every split and stored in checkpoints.
struct FeatureStats {
    std::vector<double> mean, stdev;
};

inline FeatureStats feature_stats(const Dataset& ds, const std::vector<std::string>& ids) {
    if (ids.empty()) throw ContractError("feature_stats: empty id list");
    size_t dim = ds.records.front().features.size();
    FeatureStats st;
    st.mean.assign(dim, 0.0);
    st.stdev.assign(dim, 0.0);
    for (const auto& id : ids) {
        const auto& f = ds.records[ds.index_of(id)].features;
        for (size_t j = 0; j < dim; ++j) st.mean[j] += f[j];
    }
    for (size_t j = 0; j < dim; ++j) st.mean[j] /= static_cast<double>(ids.size());
    for (const auto& id : ids) {
        const auto& f = ds.records[ds.index_of(id)].features;
        for (size_t j = 0; j < dim; ++j) st.stdev[j] += (f[j] - st.mean[j]) * (f[j] - st.mean[j]);
    }
    for (size_t j = 0; j < dim; ++j)
        st.stdev[j] = std::max(std::sqrt(st.stdev[j] / static_cast<double>(ids.size())), 1e-8);
    return st;
}

} // namespace transop

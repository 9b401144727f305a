#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crossflow/rng.hpp"
#include "crossflow/tensor.hpp"

namespace crossflow::data {

// One audiovisual sample: a per-frame grayscale stack, per-frame MFCC rows,
// a class label and the identity of the recorded person.
struct Example {
    Tensor frames;  // [T,H,W], intensities in [0,1]
    Tensor mfcc;    // [T,D]
    int label = 0;
    int person_id = 0;

    int frame_count() const { return frames.dim(0); }

    void validate() const {
        CF_CHECK(frames.rank() == 3, "example: frames must be [T,H,W]");
        CF_CHECK(mfcc.rank() == 2, "example: mfcc must be [T,D]");
        CF_CHECK(frames.dim(0) == mfcc.dim(0), "example: frames and mfcc disagree on T");
        CF_CHECK(label >= 0, "example: negative label");
        CF_CHECK(person_id >= 0, "example: negative person id");
    }
};

struct Dataset {
    std::vector<Example> examples;
    int num_classes = 0;
    std::string name;
    std::uint64_t seed = 0;  // generator seed when synthetic

    std::size_t size() const { return examples.size(); }
};

// ---------------------------------------------------------------------------
// XFT tensor file:
//   magic "XFT1" (4 bytes)
//   ndim                u32 little-endian
//   dims[ndim]          u32 little-endian each
//   values              prod(dims) float32 little-endian, row-major
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t& off, const char* what) {
    if (off + 4 > buf.size()) throw FormatError(std::string("truncated XFT data reading ") + what, off);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
        v = (v << 8) | static_cast<std::uint8_t>(buf[off + static_cast<std::size_t>(i)]);
    off += 4;
    return v;
}

}  // namespace detail

inline std::string encode_xft(const Tensor& t) {
    std::string out;
    out.reserve(8 + 4 * t.shape.dims.size() + 4 * t.numel());
    out += "XFT1";
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape.dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data)
        detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

// Parses one XFT record starting at `off`; leaves `off` just past it.
inline Tensor decode_xft(const std::string& buf, std::size_t& off) {
    if (off + 4 > buf.size()) throw FormatError("truncated XFT data reading magic", off);
    if (buf.compare(off, 4, "XFT1") != 0) throw FormatError("bad XFT magic", off);
    off += 4;
    const std::uint32_t ndim = detail::get_u32(buf, off, "ndim");
    if (ndim == 0 || ndim > 16) throw FormatError("XFT ndim out of range", off - 4);
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const std::uint32_t d = detail::get_u32(buf, off, "dims");
        if (d == 0 || d > (1u << 30)) throw FormatError("XFT dimension out of range", off - 4);
        shape.dims.push_back(static_cast<int>(d));
        count *= d;
        if (count > (1ull << 33)) throw FormatError("XFT element count too large", off - 4);
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = detail::get_u32(buf, off, "values");
        t.data[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return t;
}

inline void write_xft_file(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    const std::string buf = encode_xft(t);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

inline Tensor read_xft_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    Tensor t = decode_xft(buf, off);
    if (off != buf.size()) throw FormatError("trailing bytes after XFT record", off);
    return t;
}

// ---------------------------------------------------------------------------
// Preprocessing and splitting
// ---------------------------------------------------------------------------

// Averages the T frames (and MFCC rows, with identical windowing) down to
// target_T contiguous windows as equal as possible; the remainder is spread
// over the leading windows. With overlap > 0 each window additionally takes
// that many frames on both sides (clamped to the sequence), so adjacent
// windows share frames; overlap 0 keeps the windows disjoint.
inline Example sliding_window_average(const Example& ex, int target_t, int overlap = 0) {
    ex.validate();
    const int t = ex.frame_count();
    CF_CHECK(target_t >= 1, "sliding_window_average: target_T must be >= 1");
    CF_CHECK(overlap >= 0, "sliding_window_average: overlap must be >= 0");
    CF_CHECK(t >= target_t, "sliding_window_average: T=" + std::to_string(t) +
                                " shorter than target_T=" + std::to_string(target_t));

    const int base = t / target_t;
    const int rem = t % target_t;
    Example out;
    out.label = ex.label;
    out.person_id = ex.person_id;
    out.frames = Tensor({target_t, ex.frames.dim(1), ex.frames.dim(2)});
    out.mfcc = Tensor({target_t, ex.mfcc.dim(1)});

    const std::size_t frame_sz = static_cast<std::size_t>(ex.frames.dim(1)) * ex.frames.dim(2);
    const std::size_t mfcc_sz = static_cast<std::size_t>(ex.mfcc.dim(1));
    int start = 0;
    for (int w = 0; w < target_t; ++w) {
        const int core = base + (w < rem ? 1 : 0);
        const int lo = std::max(0, start - overlap);
        const int hi = std::min(t, start + core + overlap);
        const int len = hi - lo;
        for (int s = lo; s < hi; ++s) {
            const std::size_t src_f = static_cast<std::size_t>(s) * frame_sz;
            const std::size_t dst_f = static_cast<std::size_t>(w) * frame_sz;
            for (std::size_t i = 0; i < frame_sz; ++i) out.frames.data[dst_f + i] += ex.frames.data[src_f + i];
            const std::size_t src_m = static_cast<std::size_t>(s) * mfcc_sz;
            const std::size_t dst_m = static_cast<std::size_t>(w) * mfcc_sz;
            for (std::size_t i = 0; i < mfcc_sz; ++i) out.mfcc.data[dst_m + i] += ex.mfcc.data[src_m + i];
        }
        const double inv = 1.0 / static_cast<double>(len);
        const std::size_t dst_f = static_cast<std::size_t>(w) * frame_sz;
        for (std::size_t i = 0; i < frame_sz; ++i) out.frames.data[dst_f + i] *= inv;
        const std::size_t dst_m = static_cast<std::size_t>(w) * mfcc_sz;
        for (std::size_t i = 0; i < mfcc_sz; ++i) out.mfcc.data[dst_m + i] *= inv;
        start += core;
    }
    return out;
}

struct Fold {
    std::vector<int> train_indices;
    std::vector<int> test_indices;
};

// Person-grouped k-fold: persons are assigned to folds round-robin in sorted
// order, so no person spans train and test of the same fold.
inline std::vector<Fold> group_kfold(const Dataset& ds, int k) {
    CF_CHECK(k >= 2, "group_kfold: k must be >= 2");
    std::vector<int> persons;
    for (const Example& ex : ds.examples) persons.push_back(ex.person_id);
    std::sort(persons.begin(), persons.end());
    persons.erase(std::unique(persons.begin(), persons.end()), persons.end());
    CF_CHECK(static_cast<int>(persons.size()) >= k,
             "group_kfold: fewer distinct persons (" + std::to_string(persons.size()) +
                 ") than folds (" + std::to_string(k) + ")");

    std::vector<int> fold_of_person(persons.size());
    for (std::size_t i = 0; i < persons.size(); ++i) fold_of_person[i] = static_cast<int>(i % k);

    auto fold_of = [&](int person) {
        const auto it = std::lower_bound(persons.begin(), persons.end(), person);
        return fold_of_person[static_cast<std::size_t>(it - persons.begin())];
    };

    std::vector<Fold> folds(static_cast<std::size_t>(k));
    for (int i = 0; i < static_cast<int>(ds.examples.size()); ++i) {
        const int f = fold_of(ds.examples[static_cast<std::size_t>(i)].person_id);
        for (int j = 0; j < k; ++j) {
            if (j == f)
                folds[static_cast<std::size_t>(j)].test_indices.push_back(i);
            else
                folds[static_cast<std::size_t>(j)].train_indices.push_back(i);
        }
    }
    return folds;
}

// ---------------------------------------------------------------------------
// Synthetic aligned audiovisual generator
// ---------------------------------------------------------------------------
//
// Class information is split across modalities: the image stream shows a
// Gaussian blob travelling on a circular arc whose starting angle is one of
// ceil(sqrt(C)) quantized positions selected by (label mod Q), while the MFCC
// rows carry a sinusoid across coefficients whose frequency encodes
// floor(label / Q). Both modalities share per-person nuisance offsets and
// carry per-frame noise, so neither alone identifies the class.

struct SyntheticSpec {
    int num_classes = 10;
    int num_persons = 15;
    int examples_per_person_per_class = 5;
    int t_min = 4;
    int t_max = 8;
    int height = 40;
    int width = 40;
    int mfcc_dim = 26;
    std::uint64_t seed = 1;
};

inline Dataset gen_synthetic(const SyntheticSpec& spec) {
    CF_CHECK(spec.num_classes >= 2, "gen_synthetic: need at least 2 classes");
    CF_CHECK(spec.t_min >= 1 && spec.t_min <= spec.t_max, "gen_synthetic: bad T range");
    CF_CHECK(spec.num_persons >= 1 && spec.examples_per_person_per_class >= 1,
             "gen_synthetic: bad counts");
    CF_CHECK(spec.height >= 8 && spec.width >= 8, "gen_synthetic: image too small");
    CF_CHECK(spec.mfcc_dim >= 2, "gen_synthetic: mfcc_dim too small");

    const int q = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.num_classes))));
    const double two_pi = 6.283185307179586476925286766559;
    const double cx0 = spec.width / 2.0, cy0 = spec.height / 2.0;
    const double radius = std::min(spec.height, spec.width) / 4.0;
    const double sigma = std::min(spec.height, spec.width) / 8.0;

    Dataset ds;
    ds.num_classes = spec.num_classes;
    ds.name = "synthetic";
    ds.seed = spec.seed;

    auto f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };

    for (int p = 0; p < spec.num_persons; ++p) {
        Rng prng(derive_seed(spec.seed, 1, static_cast<std::uint64_t>(p)));
        const double person_dx = prng.uniform(-1.5, 1.5);
        const double person_dy = prng.uniform(-1.5, 1.5);
        const double person_jitter = prng.uniform(-0.2, 0.2);
        const double person_gain = prng.uniform(0.9, 1.1);
        const double person_phase = prng.uniform(0.0, two_pi);
        std::vector<double> person_mfcc_off(static_cast<std::size_t>(spec.mfcc_dim));
        for (double& v : person_mfcc_off) v = 0.1 * prng.normal();

        for (int c = 0; c < spec.num_classes; ++c) {
            for (int rep = 0; rep < spec.examples_per_person_per_class; ++rep) {
                Rng erng(derive_seed(spec.seed, 2, static_cast<std::uint64_t>(p),
                                     static_cast<std::uint64_t>(c * 1000 + rep)));
                const int t_len =
                    spec.t_min + static_cast<int>(erng.uniform_int(
                                     static_cast<std::uint64_t>(spec.t_max - spec.t_min + 1)));
                Example ex;
                ex.label = c;
                ex.person_id = p;
                ex.frames = Tensor({t_len, spec.height, spec.width});
                ex.mfcc = Tensor({t_len, spec.mfcc_dim});

                const double start_angle = two_pi * (c % q) / q + person_jitter;
                const double sweep = 0.4 * (two_pi / q);
                const int freq = 1 + c / q;

                for (int t = 0; t < t_len; ++t) {
                    const double prog = t_len > 1 ? static_cast<double>(t) / (t_len - 1) : 0.0;
                    const double angle = start_angle + sweep * prog;
                    const double cx = cx0 + radius * std::cos(angle) + person_dx;
                    const double cy = cy0 + radius * std::sin(angle) + person_dy;
                    for (int y = 0; y < spec.height; ++y) {
                        for (int x = 0; x < spec.width; ++x) {
                            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                            double v = 0.7 * person_gain * std::exp(-d2 / (2.0 * sigma * sigma));
                            v += 0.02 * erng.normal();
                            ex.frames.at(t, y, x) = f32(std::clamp(v, 0.0, 1.0));
                        }
                    }
                    const double psi = person_phase + 0.5 * two_pi * prog;
                    for (int j = 0; j < spec.mfcc_dim; ++j) {
                        double v = std::sin(two_pi * freq * (j + 1) / spec.mfcc_dim + psi);
                        v += person_mfcc_off[static_cast<std::size_t>(j)] + 0.05 * erng.normal();
                        ex.mfcc.at(t, j) = f32(v);
                    }
                }
                ds.examples.push_back(std::move(ex));
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + one XFT file per tensor
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string());

    nlohmann::json manifest;
    manifest["name"] = ds.name;
    manifest["num_classes"] = ds.num_classes;
    manifest["seed"] = ds.seed;
    nlohmann::json entries = nlohmann::json::array();
    char buf[64];
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        const Example& ex = ds.examples[i];
        std::snprintf(buf, sizeof(buf), "e%05zu", i);
        const std::string stem(buf);
        const std::string frames_file = stem + ".frames.xft";
        const std::string mfcc_file = stem + ".mfcc.xft";
        write_xft_file(dir / frames_file, ex.frames);
        write_xft_file(dir / mfcc_file, ex.mfcc);
        entries.push_back({{"frames_file", frames_file},
                           {"mfcc_file", mfcc_file},
                           {"label", ex.label},
                           {"person_id", ex.person_id}});
    }
    manifest["examples"] = std::move(entries);

    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest: " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
    if (!out) throw IoError("manifest write failed");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("cannot open manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest.json: " + std::string(e.what()));
    }

    Dataset ds;
    try {
        ds.name = manifest.at("name").get<std::string>();
        ds.num_classes = manifest.at("num_classes").get<int>();
        ds.seed = manifest.value("seed", 0ull);
        for (const auto& entry : manifest.at("examples")) {
            Example ex;
            ex.frames = read_xft_file(dir / entry.at("frames_file").get<std::string>());
            ex.mfcc = read_xft_file(dir / entry.at("mfcc_file").get<std::string>());
            ex.label = entry.at("label").get<int>();
            ex.person_id = entry.at("person_id").get<int>();
            ds.examples.push_back(std::move(ex));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest.json missing fields: " + std::string(e.what()));
    }

    if (ds.num_classes < 2) throw ValidationError("dataset must declare at least 2 classes");
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        const Example& ex = ds.examples[i];
        try {
            ex.validate();
        } catch (const ContractViolation& e) {
            throw ValidationError("example " + std::to_string(i) + ": " + e.what());
        }
        if (ex.label >= ds.num_classes)
            throw ValidationError("example " + std::to_string(i) + ": label out of range");
    }
    return ds;
}

}  // namespace crossflow::data

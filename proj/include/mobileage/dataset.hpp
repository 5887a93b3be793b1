#pragma once

#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/error.hpp"
#include "mobileage/image.hpp"
#include "mobileage/rng.hpp"

namespace mobileage {

inline constexpr double kAgeMin = 0.0;
inline constexpr double kAgeMax = 116.0;
inline constexpr int kBinWidth = 5;
inline constexpr int kNumBins = 24; // bins 0..23 cover [0, 116]

enum class Split { Train, Val, Test };

inline std::string_view split_name(Split s)
{
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view name)
{
    if (name == "train") return Split::Train;
    if (name == "val" || name == "validation") return Split::Val;
    if (name == "test") return Split::Test;
    throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

/// Half-open five-year bins: [5k, 5k+5).
inline int age_bin(double age)
{
    if (!std::isfinite(age) || age < kAgeMin || age > kAgeMax)
        throw DataError("age out of range: " + std::to_string(age));
    return static_cast<int>(std::floor(age / kBinWidth));
}

struct Sample {
    std::string id;
    std::filesystem::path image_ref;
    double age = 0.0;
    int bin = 0;

    friend bool operator==(const Sample&, const Sample&) = default;
};

inline Sample make_sample(std::string id, std::filesystem::path image_ref, double age)
{
    const int bin = age_bin(age);
    return Sample{std::move(id), std::move(image_ref), age, bin};
}

// ---------------------------------------------------------------------------
// Curation

enum class RejectReason { MissingImage, UnreadableImage, MissingAge, OutOfRangeAge, NonNumericAge };

inline std::string_view reject_reason_name(RejectReason r)
{
    switch (r) {
    case RejectReason::MissingImage: return "missing_image";
    case RejectReason::UnreadableImage: return "unreadable_image";
    case RejectReason::MissingAge: return "missing_age";
    case RejectReason::OutOfRangeAge: return "out_of_range_age";
    case RejectReason::NonNumericAge: return "non_numeric_age";
    }
    return "?";
}

/// One unvalidated input row. `raw_age` is textual so that missing and
/// non-numeric labels can be told apart.
struct RawRecord {
    std::string image_ref;
    std::optional<std::string> raw_age;
};

struct CurationLog {
    std::size_t total = 0;
    std::size_t kept = 0;
    std::map<RejectReason, std::size_t> rejected;
    std::vector<std::pair<std::string, RejectReason>> rejections;

    [[nodiscard]] std::size_t count(RejectReason r) const
    {
        const auto it = rejected.find(r);
        return it == rejected.end() ? 0 : it->second;
    }
};

inline void to_json(nlohmann::json& j, const CurationLog& log)
{
    nlohmann::json by_reason = nlohmann::json::object();
    for (auto r : {RejectReason::MissingImage, RejectReason::UnreadableImage, RejectReason::MissingAge,
                   RejectReason::OutOfRangeAge, RejectReason::NonNumericAge})
        by_reason[std::string(reject_reason_name(r))] = log.count(r);
    j = {{"total", log.total}, {"kept", log.kept}, {"rejected", by_reason}};
}

inline void from_json(const nlohmann::json& j, CurationLog& log)
{
    log.total = j.at("total").get<std::size_t>();
    log.kept = j.at("kept").get<std::size_t>();
    for (auto r : {RejectReason::MissingImage, RejectReason::UnreadableImage, RejectReason::MissingAge,
                   RejectReason::OutOfRangeAge, RejectReason::NonNumericAge}) {
        const auto n = j.at("rejected").value(std::string(reject_reason_name(r)), std::size_t{0});
        if (n) log.rejected[r] = n;
    }
}

/// Strict decimal parse of an age label; the whole string must be consumed.
inline std::optional<double> parse_number(std::string_view text)
{
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
    if (text.empty()) return std::nullopt;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

/// UTKFace-style names carry the age as the leading underscore-delimited
/// token, e.g. "25_1_0_20170109150557335.jpg.chip.jpg". Only a non-empty
/// run of decimal digits is accepted.
inline std::optional<double> parse_age_from_name(std::string_view filename)
{
    const auto us = filename.find('_');
    if (us == std::string_view::npos || us == 0) return std::nullopt;
    const auto token = filename.substr(0, us);
    for (char c : token)
        if (c < '0' || c > '9') return std::nullopt;
    return parse_number(token);
}

using ImageCheck = std::function<void(const std::filesystem::path&)>;

/// Default decodability check; throws ImageDecodeError.
inline void check_decodable(const std::filesystem::path& p) { (void)decode_image(p); }

struct CurationResult {
    std::vector<Sample> samples;
    CurationLog log;
};

/// Keep records with a decodable image and a numeric age in [0, 116].
/// Sample ids are the image references as given.
inline CurationResult curate(const std::vector<RawRecord>& records, const ImageCheck& check = check_decodable)
{
    CurationResult out;
    out.log.total = records.size();
    std::set<std::string> seen;
    auto reject = [&](const RawRecord& r, RejectReason why) {
        ++out.log.rejected[why];
        out.log.rejections.emplace_back(r.image_ref, why);
    };
    for (const auto& r : records) {
        if (!r.raw_age || r.raw_age->find_first_not_of(" \t\r") == std::string::npos) {
            reject(r, RejectReason::MissingAge);
            continue;
        }
        const auto age = parse_number(*r.raw_age);
        if (!age) {
            reject(r, RejectReason::NonNumericAge);
            continue;
        }
        if (*age < kAgeMin || *age > kAgeMax) {
            reject(r, RejectReason::OutOfRangeAge);
            continue;
        }
        std::error_code ec;
        if (r.image_ref.empty() || !std::filesystem::is_regular_file(r.image_ref, ec)) {
            reject(r, RejectReason::MissingImage);
            continue;
        }
        try {
            check(r.image_ref);
        } catch (const ImageDecodeError&) {
            reject(r, RejectReason::UnreadableImage);
            continue;
        }
        if (!seen.insert(r.image_ref).second) throw DataError("duplicate sample id: " + r.image_ref);
        out.samples.push_back(make_sample(r.image_ref, r.image_ref, *age));
    }
    out.log.kept = out.samples.size();
    if (out.samples.empty()) throw DataError("no usable samples");
    return out;
}

/// Raw records from a directory of images with filename-encoded ages,
/// in lexicographic filename order.
inline std::vector<RawRecord> records_from_directory(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir)) throw DataError("image directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<RawRecord> out;
    out.reserve(files.size());
    for (const auto& f : files) {
        const auto name = f.filename().string();
        RawRecord r{f.string(), std::nullopt};
        const auto us = name.find('_');
        if (us != std::string::npos && us > 0) r.raw_age = name.substr(0, us);
        out.push_back(std::move(r));
    }
    return out;
}

/// Raw records from a two-column index file: `path<sep>age` per line, with
/// tab or comma separators. Relative paths resolve against the index file's
/// directory. Lines starting with '#' are comments.
inline std::vector<RawRecord> records_from_index(const std::filesystem::path& index)
{
    std::ifstream in(index);
    if (!in) throw DataError("index file not found: " + index.string());
    const auto base = index.parent_path();
    std::vector<RawRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto sep = line.find_first_of("\t,");
        std::string path = line.substr(0, sep);
        std::filesystem::path p(path);
        if (!path.empty() && p.is_relative()) p = base / p;
        RawRecord r{path.empty() ? std::string{} : p.lexically_normal().string(), std::nullopt};
        if (sep != std::string::npos) r.raw_age = line.substr(sep + 1);
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_samples_tsv(const std::filesystem::path& path, const std::vector<Sample>& samples)
{
    std::ostringstream os;
    os << "id\timage_ref\tage\tbin\n";
    for (const auto& s : samples) {
        char buf[64];
        const auto res = std::to_chars(buf, buf + sizeof(buf), s.age);
        os << s.id << '\t' << s.image_ref.string() << '\t' << std::string_view(buf, res.ptr - buf) << '\t' << s.bin << '\n';
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << os.str();
}

inline std::vector<Sample> read_samples_tsv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("sample table not found: " + path.string() + " (produce it with `mobileage prepare`)");
    std::vector<Sample> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
        if (cols.size() != 4) throw DataError("malformed sample row in " + path.string() + ": " + line);
        const auto age = parse_number(cols[2]);
        if (!age) throw DataError("malformed age in " + path.string() + ": " + cols[2]);
        out.push_back(make_sample(cols[0], cols[1], *age));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stratified split

struct SplitRatios {
    double train = 0.70;
    double val = 0.10;
    double test = 0.20;

    [[nodiscard]] std::array<double, 3> as_array() const { return {train, val, test}; }
    void validate() const
    {
        if (!(train > 0 && val > 0 && test > 0)) throw ConfigError("split ratios must be positive");
        if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    }
    friend bool operator==(const SplitRatios&, const SplitRatios&) = default;
};

struct BinCounts {
    std::size_t train = 0, val = 0, test = 0;
    [[nodiscard]] std::size_t total() const { return train + val + test; }
    [[nodiscard]] std::size_t of(Split s) const { return s == Split::Train ? train : s == Split::Val ? val : test; }
    friend bool operator==(const BinCounts&, const BinCounts&) = default;
};

/// Bins with fewer samples than this are assigned wholly to TRAIN.
inline constexpr std::size_t kMinStratifiedBin = 3;

struct SplitManifest {
    std::uint64_t seed = 42;
    SplitRatios ratios;
    std::map<std::string, Split> assignment;
    std::map<int, BinCounts> bin_counts;
    std::map<std::string, double> weights;
    std::vector<int> degenerate_bins;
    std::optional<CurationLog> curation_log;

    [[nodiscard]] std::size_t size() const { return assignment.size(); }
    [[nodiscard]] std::size_t count(Split s) const
    {
        std::size_t n = 0;
        for (const auto& [_, c] : bin_counts) n += c.of(s);
        return n;
    }
};

/// Split sizes for one bin by largest remainder: every split gets
/// floor(ratio * n) and the leftover samples go to the largest fractional
/// parts, ties resolved test, then val, then train. Each count is within one
/// sample of its exact share.
inline BinCounts allocate_bin(std::size_t n, const SplitRatios& r)
{
    if (n < kMinStratifiedBin) return {n, 0, 0};
    const auto shares = r.as_array();
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = shares[i] * static_cast<double>(n);
        const double fl = std::floor(exact + 1e-9);
        counts[i] = static_cast<std::size_t>(fl);
        frac[i] = exact - fl;
        assigned += counts[i];
    }
    std::array<int, 3> order{2, 1, 0};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];
    return {counts[0], counts[1], counts[2]};
}

/// Inverse square root of each TRAIN sample's bin frequency.
inline std::map<std::string, double> compute_bin_weights(const SplitManifest& m,
                                                         const std::map<std::string, int>& bin_of)
{
    std::map<std::string, double> w;
    for (const auto& [id, split] : m.assignment) {
        if (split != Split::Train) continue;
        const int b = bin_of.at(id);
        const auto n = m.bin_counts.at(b).train;
        w[id] = 1.0 / std::sqrt(static_cast<double>(n));
    }
    if (w.empty()) throw DataError("manifest has an empty TRAIN split");
    return w;
}

/// Seeded per-bin shuffle and partition. Within a bin samples are first put
/// in id order, so the result depends only on ids, ages, ratios and seed.
inline SplitManifest stratified_split(const std::vector<Sample>& samples, const SplitRatios& ratios, std::uint64_t seed)
{
    ratios.validate();
    if (samples.empty()) throw DataError("no usable samples");
    std::map<int, std::vector<std::string>> by_bin;
    std::map<std::string, int> bin_of;
    for (const auto& s : samples) {
        if (!bin_of.emplace(s.id, s.bin).second) throw DataError("duplicate sample id: " + s.id);
        by_bin[s.bin].push_back(s.id);
    }
    SplitManifest m;
    m.seed = seed;
    m.ratios = ratios;
    for (auto& [bin, ids] : by_bin) {
        std::sort(ids.begin(), ids.end());
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(bin)));
        rng.shuffle(std::span<std::string>(ids));
        const auto counts = allocate_bin(ids.size(), ratios);
        if (ids.size() < kMinStratifiedBin) m.degenerate_bins.push_back(bin);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const Split s = i < counts.train ? Split::Train : i < counts.train + counts.val ? Split::Val : Split::Test;
            m.assignment.emplace(ids[i], s);
        }
        m.bin_counts[bin] = counts;
    }
    m.weights = compute_bin_weights(m, bin_of);
    return m;
}

inline nlohmann::json manifest_to_json(const SplitManifest& m)
{
    nlohmann::json assignment = nlohmann::json::object();
    for (const auto& [id, s] : m.assignment) assignment[id] = split_name(s);
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [b, c] : m.bin_counts) counts[std::to_string(b)] = {c.train, c.val, c.test};
    nlohmann::json j{{"seed", m.seed},
                     {"ratios", {m.ratios.train, m.ratios.val, m.ratios.test}},
                     {"assignment", assignment},
                     {"bin_counts", counts},
                     {"weights", m.weights},
                     {"degenerate_bins", m.degenerate_bins},
                     {"curation_log", nullptr}};
    if (m.curation_log) j["curation_log"] = *m.curation_log;
    return j;
}

/// Canonical text form: sorted keys, fixed indentation.
inline std::string serialize_manifest(const SplitManifest& m) { return manifest_to_json(m).dump(2) + "\n"; }

inline SplitManifest manifest_from_json(const nlohmann::json& j)
{
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto r = j.at("ratios").get<std::vector<double>>();
    if (r.size() != 3) throw DataError("manifest ratios must have three entries");
    m.ratios = {r[0], r[1], r[2]};
    for (const auto& [id, s] : j.at("assignment").items()) m.assignment.emplace(id, parse_split(s.get<std::string>()));
    for (const auto& [b, c] : j.at("bin_counts").items())
        m.bin_counts[std::stoi(b)] = {c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(), c.at(2).get<std::size_t>()};
    m.weights = j.at("weights").get<std::map<std::string, double>>();
    m.degenerate_bins = j.value("degenerate_bins", std::vector<int>{});
    if (j.contains("curation_log") && !j.at("curation_log").is_null()) m.curation_log = j.at("curation_log").get<CurationLog>();
    return m;
}

inline SplitManifest load_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("split manifest not found: " + path.string() + " (produce it with `mobileage split`)");
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("corrupt split manifest: " + path.string());
    return manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Split access

/// Counts how many samples of each split were handed out. Used to prove the
/// held-out split is never touched during model selection.
class AccessAudit {
public:
    void record(Split s, std::size_t n) { reads_[static_cast<int>(s)] += n; }
    [[nodiscard]] std::size_t reads(Split s) const { return reads_[static_cast<int>(s)].load(); }

private:
    std::array<std::atomic<std::size_t>, 3> reads_{};
};

/// Curated samples joined with a split manifest.
class SplitDataset {
public:
    SplitDataset(std::vector<Sample> samples, SplitManifest manifest, AccessAudit* audit = nullptr)
        : samples_(std::move(samples)), manifest_(std::move(manifest)), audit_(audit)
    {
        for (const auto& s : samples_)
            if (!manifest_.assignment.contains(s.id)) throw DataError("sample '" + s.id + "' missing from split manifest");
        if (samples_.size() != manifest_.assignment.size())
            throw DataError("split manifest covers " + std::to_string(manifest_.assignment.size()) + " samples but the sample table has " +
                            std::to_string(samples_.size()));
    }

    /// Samples of one split in canonical (id) order.
    [[nodiscard]] std::vector<Sample> split(Split which) const
    {
        std::vector<Sample> out;
        for (const auto& s : samples_)
            if (manifest_.assignment.at(s.id) == which) out.push_back(s);
        std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
        if (audit_) audit_->record(which, out.size());
        return out;
    }

    [[nodiscard]] const SplitManifest& manifest() const noexcept { return manifest_; }
    [[nodiscard]] const std::vector<Sample>& samples() const noexcept { return samples_; }
    void set_audit(AccessAudit* audit) noexcept { audit_ = audit; }

private:
    std::vector<Sample> samples_;
    SplitManifest manifest_;
    AccessAudit* audit_ = nullptr;
};

} // namespace mobileage

namespace mobileage {

/// Where decoded pixels for a sample come from.
class ImageSource {
public:
    virtual ~ImageSource() = default;
    [[nodiscard]] virtual Image load(const Sample& s) const = 0;
};

class FileImageSource final : public ImageSource {
public:
    [[nodiscard]] Image load(const Sample& s) const override { return decode_image(s.image_ref); }
};

/// Pre-decoded images keyed by sample id.
class MemoryImageSource final : public ImageSource {
public:
    void put(const std::string& id, Image img) { images_[id] = std::move(img); }
    [[nodiscard]] Image load(const Sample& s) const override
    {
        const auto it = images_.find(s.id);
        if (it == images_.end()) throw ImageDecodeError("no image for sample " + s.id);
        return it->second;
    }

private:
    std::map<std::string, Image> images_;
};

} // namespace mobileage

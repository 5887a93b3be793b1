#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mobileage/dataset.hpp"
#include "mobileage/rng.hpp"
#include "mobileage/synthetic.hpp"

using namespace mobileage;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    auto d = fs::temp_directory_path() / ("mobileage_test_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

void touch(const fs::path& p) { std::ofstream(p) << "x"; }

// Ages skewed towards young adults, like the real corpus.
std::vector<Sample> skewed(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "s%05zu", i);
        out.push_back(make_sample(id, std::string(id) + ".jpg", synthetic::sample_age(rng)));
    }
    return out;
}

} // namespace

TEST(Dataset, AgeBinIsHalfOpenFloor)
{
    EXPECT_EQ(age_bin(0.0), 0);
    EXPECT_EQ(age_bin(4.999), 0);
    EXPECT_EQ(age_bin(25.0), 5);
    EXPECT_EQ(age_bin(116.0), 23);
    EXPECT_THROW(age_bin(-0.5), DataError);
    EXPECT_THROW(age_bin(116.5), DataError);
    EXPECT_THROW(age_bin(std::nan("")), DataError);
}

TEST(Dataset, ParseAgeFromName)
{
    EXPECT_EQ(parse_age_from_name("25_1_0_20170109.jpg"), 25.0);
    EXPECT_EQ(parse_age_from_name("0_0_0_x.jpg"), 0.0);
    EXPECT_FALSE(parse_age_from_name("_1_0_x.jpg").has_value());
    EXPECT_FALSE(parse_age_from_name("abc_1_0_x.jpg").has_value());
    EXPECT_FALSE(parse_age_from_name("noseparator.jpg").has_value());

    // [age]_[gender]_[race]_[date&time].jpg.chip.jpg as distributed
    const std::vector<std::pair<std::string, double>> names{
        {"1_0_0_20161219140623097.jpg.chip.jpg", 1},   {"9_1_2_20161219204347420.jpg.chip.jpg", 9},
        {"26_0_1_20170116010114628.jpg.chip.jpg", 26}, {"35_1_0_20170117135239285.jpg.chip.jpg", 35},
        {"45_0_3_20170119171400705.jpg.chip.jpg", 45}, {"53_1_0_20170110122625718.jpg.chip.jpg", 53},
        {"61_0_0_20170117174637422.jpg.chip.jpg", 61}, {"78_1_0_20170120134639935.jpg.chip.jpg", 78},
        {"90_1_0_20170110182510232.jpg.chip.jpg", 90}, {"116_1_0_20170120134921760.jpg.chip.jpg", 116},
    };
    for (const auto& [n, age] : names) EXPECT_EQ(parse_age_from_name(n), age) << n;
}

TEST(Dataset, CurationCountsEveryRejectReason)
{
    const auto dir = scratch("curate");
    for (auto n : {"ok.jpg", "bad.jpg", "old.jpg", "word.jpg", "noage.jpg"}) touch(dir / n);
    const auto p = [&](const char* n) { return (dir / n).string(); };
    const std::vector<RawRecord> raw{
        {p("ok.jpg"), "25.0"},       {p("missing.jpg"), "40"}, {p("bad.jpg"), "30"},
        {p("old.jpg"), "130"},       {p("word.jpg"), "abc"},   {p("noage.jpg"), std::nullopt},
    };
    auto check = [](const fs::path& f) {
        if (f.filename() == "bad.jpg") throw ImageDecodeError("corrupt");
    };
    const auto r = curate(raw, check);
    ASSERT_EQ(r.samples.size(), 1U);
    EXPECT_EQ(r.samples[0].age, 25.0);
    EXPECT_EQ(r.samples[0].bin, 5);
    EXPECT_EQ(r.log.total, 6U);
    EXPECT_EQ(r.log.kept, 1U);
    EXPECT_EQ(r.log.count(RejectReason::MissingImage), 1U);
    EXPECT_EQ(r.log.count(RejectReason::UnreadableImage), 1U);
    EXPECT_EQ(r.log.count(RejectReason::OutOfRangeAge), 1U);
    EXPECT_EQ(r.log.count(RejectReason::NonNumericAge), 1U);
    EXPECT_EQ(r.log.count(RejectReason::MissingAge), 1U);
}

TEST(Dataset, CurationOfNothingUsableIsFatal)
{
    const std::vector<RawRecord> raw{{"/nonexistent/a.jpg", "3"}};
    EXPECT_THROW(curate(raw, [](const fs::path&) {}), DataError);
}

TEST(Dataset, RealImageDecodeCheck)
{
    const auto dir = scratch("decode");
    write_image(dir / "20_0_0_x.png", synthetic::render_face(20, 1, 32));
    std::ofstream(dir / "30_0_0_y.png") << "not an image";
    const auto r = curate(records_from_directory(dir));
    EXPECT_EQ(r.samples.size(), 1U);
    EXPECT_EQ(r.log.count(RejectReason::UnreadableImage), 1U);
}

TEST(Dataset, IndexFileResolvesRelativePaths)
{
    const auto dir = scratch("index");
    touch(dir / "a.jpg");
    std::ofstream(dir / "index.tsv") << "# path\tage\na.jpg\t33\nb.jpg,12\n";
    const auto raw = records_from_index(dir / "index.tsv");
    ASSERT_EQ(raw.size(), 2U);
    EXPECT_EQ(fs::path(raw[0].image_ref), (dir / "a.jpg").lexically_normal());
    EXPECT_EQ(raw[1].raw_age, "12");
}

TEST(Dataset, AllocationExamples)
{
    EXPECT_EQ(allocate_bin(100, {}), (BinCounts{70, 10, 20}));
    EXPECT_EQ(allocate_bin(23, {}), (BinCounts{16, 2, 5}));
    EXPECT_EQ(allocate_bin(2, {}), (BinCounts{2, 0, 0}));
    // floor/floor/remainder would give test 5 against an exact share of 3.8
    EXPECT_EQ(allocate_bin(19, {}), (BinCounts{13, 2, 4}));
}

TEST(Dataset, AllocationStaysWithinOneOfExactShare)
{
    const std::vector<SplitRatios> ratios{{}, {0.8, 0.1, 0.1}, {0.6, 0.2, 0.2}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, {0.55, 0.15, 0.30}};
    for (const auto& r : ratios)
        for (std::size_t n = kMinStratifiedBin; n <= 2000; ++n) {
            const auto c = allocate_bin(n, r);
            ASSERT_EQ(c.total(), n);
            const auto share = r.as_array();
            const std::array<std::size_t, 3> got{c.train, c.val, c.test};
            for (int i = 0; i < 3; ++i) ASSERT_LE(std::abs(static_cast<double>(got[i]) - share[i] * n), 1.0) << n;
        }
}

TEST(Dataset, SplitPropertiesOnSkewedTenThousand)
{
    const auto samples = skewed(10000, 3);
    const auto m = stratified_split(samples, {}, 42);

    ASSERT_EQ(m.assignment.size(), samples.size());
    std::map<int, std::array<std::size_t, 3>> seen;
    for (const auto& s : samples) seen[s.bin][static_cast<int>(m.assignment.at(s.id))]++;
    std::size_t total = 0;
    for (const auto& [b, c] : m.bin_counts) {
        EXPECT_EQ(seen[b][0], c.train);
        EXPECT_EQ(seen[b][1], c.val);
        EXPECT_EQ(seen[b][2], c.test);
        total += c.total();
        if (c.total() < kMinStratifiedBin) continue;
        EXPECT_LE(std::abs(c.train - 0.7 * c.total()), 1.0);
        EXPECT_LE(std::abs(c.val - 0.1 * c.total()), 1.0);
        EXPECT_LE(std::abs(c.test - 0.2 * c.total()), 1.0);
    }
    EXPECT_EQ(total, samples.size());

    EXPECT_EQ(serialize_manifest(m), serialize_manifest(stratified_split(samples, {}, 42)));
    EXPECT_NE(serialize_manifest(m), serialize_manifest(stratified_split(samples, {}, 43)));

    // input order does not matter
    auto shuffled = samples;
    Rng rng(9);
    rng.shuffle(std::span<Sample>(shuffled));
    EXPECT_EQ(serialize_manifest(m), serialize_manifest(stratified_split(shuffled, {}, 42)));
}

TEST(Dataset, DegenerateBinsGoToTrain)
{
    std::vector<Sample> s{make_sample("a", "a", 101), make_sample("b", "b", 102)};
    for (int i = 0; i < 10; ++i) s.push_back(make_sample("y" + std::to_string(i), "y", 20));
    const auto m = stratified_split(s, {}, 1);
    EXPECT_EQ(m.assignment.at("a"), Split::Train);
    EXPECT_EQ(m.assignment.at("b"), Split::Train);
    EXPECT_EQ(m.degenerate_bins, std::vector<int>{20});
}

TEST(Dataset, AddingABinDoesNotPerturbOthers)
{
    auto s = skewed(500, 5);
    const auto before = stratified_split(s, {}, 42);
    for (int i = 0; i < 7; ++i) s.push_back(make_sample("new" + std::to_string(i), "n", 112));
    const auto after = stratified_split(s, {}, 42);
    for (const auto& [id, sp] : before.assignment) EXPECT_EQ(after.assignment.at(id), sp) << id;
}

TEST(Dataset, BinWeights)
{
    std::vector<Sample> s;
    auto add = [&](int n, double age, const std::string& tag) {
        for (int i = 0; i < n; ++i) s.push_back(make_sample(tag + std::to_string(i), "x", age));
    };
    add(1, 2, "one");
    add(4, 12, "four");      // < 3 per split, so check the actual train count below
    add(72, 40, "many");
    const auto m = stratified_split(s, {}, 42);
    for (const auto& [id, w] : m.weights) {
        EXPECT_EQ(m.assignment.at(id), Split::Train);
        const int b = age_bin(id.starts_with("one") ? 2 : id.starts_with("four") ? 12 : 40);
        EXPECT_DOUBLE_EQ(w, 1.0 / std::sqrt(static_cast<double>(m.bin_counts.at(b).train)));
    }
    EXPECT_DOUBLE_EQ(m.weights.at("one0"), 1.0);
    EXPECT_EQ(m.bin_counts.at(8).train, 50U);
    for (const auto& [id, w] : m.weights) {
        if (id.starts_with("many")) {
            EXPECT_NEAR(w, 0.1414213562373095, 1e-15);
        }
    }
    EXPECT_EQ(m.weights.size(), m.count(Split::Train));
}

TEST(Dataset, ManifestRoundTripIsByteIdentical)
{
    auto m = stratified_split(skewed(300, 8), {}, 7);
    m.curation_log = CurationLog{300, 300, {}, {}};
    const auto text = serialize_manifest(m);
    const auto back = manifest_from_json(nlohmann::json::parse(text));
    EXPECT_EQ(serialize_manifest(back), text);
}

TEST(Dataset, RatiosMustBePositiveAndSumToOne)
{
    EXPECT_THROW((SplitRatios{0.7, 0.2, 0.2}.validate()), ConfigError);
    EXPECT_THROW((SplitRatios{1.0, 0.0, 0.0}.validate()), ConfigError);
    EXPECT_NO_THROW(SplitRatios{}.validate());
}

TEST(Dataset, SplitDatasetAuditsReads)
{
    const auto s = skewed(100, 2);
    AccessAudit audit;
    SplitDataset d(s, stratified_split(s, {}, 42), &audit);
    const auto val = d.split(Split::Val);
    EXPECT_TRUE(std::is_sorted(val.begin(), val.end(), [](auto& a, auto& b) { return a.id < b.id; }));
    EXPECT_EQ(audit.reads(Split::Val), val.size());
    EXPECT_EQ(audit.reads(Split::Test), 0U);
}

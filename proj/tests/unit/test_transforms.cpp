#include <gtest/gtest.h>

#include <opencv2/imgproc.hpp>

#include "mobileage/synthetic.hpp"
#include "mobileage/transforms.hpp"

using namespace mobileage;

namespace {

Image uniform_image(int w, int h, std::uint8_t v)
{
    Image img(w, h);
    std::fill(img.rgb.begin(), img.rgb.end(), v);
    return img;
}

} // namespace

TEST(Transforms, MidGrayNormalizesToScalarOracle)
{
    const auto t = apply_eval(uniform_image(50, 70, 128));
    ASSERT_EQ(t.shape(), (Shape{3, 224, 224}));
    for (int c = 0; c < 3; ++c) {
        const double expect = (128.0 / 255.0 - kNormMean[c]) / kNormStd[c];
        EXPECT_NEAR(t[c * 224 * 224 + 777], expect, 1e-6);
    }
    // (0.50196 - 0.485) / 0.229
    EXPECT_NEAR(t[0], 0.07406, 1e-5);
}

TEST(Transforms, BlackImageIsMinusMeanOverStd)
{
    const auto t = apply_eval(uniform_image(10, 10, 0));
    const double expect[3]{-2.1179, -2.0357, -1.8044};
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(t[c * 224 * 224], expect[c], 1e-4);
}

TEST(Transforms, EvalIsDeterministicAndIgnoresRng)
{
    const auto img = synthetic::render_face(40, 3);
    const auto a = apply_eval(img);
    Rng r1(1), r2(999);
    const auto spec = make_transform("eval_deterministic");
    EXPECT_EQ(apply(spec, img, r1).storage(), a.storage());
    EXPECT_EQ(apply(spec, img, r2).storage(), a.storage());
    Rng r3(5);
    const auto before = r3.next();
    Rng r4(5);
    (void)apply(spec, img, r4);
    EXPECT_EQ(r4.next(), before);
}

TEST(Transforms, FlipIsAnInvolutionOnWidth)
{
    Tensor t({3, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    const auto f = flip_horizontal(t);
    EXPECT_EQ(f.storage(), (std::vector<float>{2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11}));
    EXPECT_EQ(flip_horizontal(f).storage(), t.storage());

    const auto x = apply_eval(synthetic::render_face(30, 8));
    const auto fx = flip_horizontal(x);
    double s0 = 0, s1 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        s0 += x[i];
        s1 += fx[i];
    }
    EXPECT_NEAR(s0, s1, 1e-6 * std::abs(s0) + 1e-6);
}

TEST(Transforms, DenormalizeInvertsNormalize)
{
    const auto img = synthetic::render_face(60, 2, 224);
    const auto t = apply_eval(img);
    const auto back = denormalize(t);
    for (std::size_t i = 0; i < back.size(); i += 97) {
        const auto c = i / (224 * 224), p = i % (224 * 224);
        EXPECT_NEAR(back[i], img.rgb[p * 3 + c] / 255.0, 1e-6);
    }
}

TEST(Transforms, ResizeMatchesOpenCvBilinear)
{
    const auto img = synthetic::render_face(25, 4, 97);
    const auto f = transform_ops::to_float(img);
    cv::Mat src(img.height, img.width, CV_32FC3, const_cast<float*>(f.px.data()));
    for (auto [h, w] : {std::pair{224, 224}, std::pair{50, 61}, std::pair{256, 300}}) {
        cv::Mat dst;
        cv::resize(src, dst, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
        const auto ours = transform_ops::resize(f, h, w);
        ASSERT_EQ(ours.px.size(), dst.total() * 3);
        const auto* ref = dst.ptr<float>();
        double worst = 0;
        for (std::size_t i = 0; i < ours.px.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(ours.px[i] - ref[i])));
        EXPECT_LT(worst, 1e-5) << h << "x" << w;
    }
}

TEST(Transforms, NamedPipelinesShareNormalizationAndSize)
{
    const auto img = synthetic::render_face(45, 6, 180);
    for (auto name : {"norm_256", "norm_256_flip", "resize_colorjit_flip_blur", "eval_deterministic"}) {
        const auto spec = make_transform(name);
        Rng a(11), b(11);
        const auto ta = apply(spec, img, a);
        EXPECT_EQ(ta.shape(), (Shape{3, 224, 224})) << name;
        EXPECT_EQ(ta.storage(), apply(spec, img, b).storage()) << name;
    }
    EXPECT_FALSE(make_transform("norm_256").stochastic());
    EXPECT_TRUE(make_transform("norm_256_flip").stochastic());
    EXPECT_EQ(make_transform("norm_256").params.resize, 256);
    EXPECT_EQ(make_transform("Resize_ColorJit_Flip_Blur").kind, TransformKind::ResizeColorJitFlipBlur);
    EXPECT_THROW(make_transform("rotate_90"), ConfigError);
}

TEST(Transforms, FlipPipelineFlipsAboutHalfTheTime)
{
    const auto img = synthetic::render_face(45, 6, 120);
    const auto spec = make_transform("norm_256_flip");
    Rng plain(0);
    const auto unflipped = apply(make_transform("norm_256"), img, plain).storage();
    const auto flipped = flip_horizontal(apply(make_transform("norm_256"), img, plain)).storage();
    int n_flip = 0;
    for (int i = 0; i < 200; ++i) {
        Rng r(derive_seed(3, i));
        const auto v = apply(spec, img, r).storage();
        if (v == flipped) ++n_flip;
        else EXPECT_EQ(v, unflipped);
    }
    EXPECT_GT(n_flip, 70);
    EXPECT_LT(n_flip, 130);
}

TEST(Transforms, SpecRoundTripsThroughJson)
{
    auto s = make_transform("resize_colorjit_flip_blur");
    s.params.blur_p = 0.3;
    const nlohmann::json j = s;
    EXPECT_EQ(j.get<TransformSpec>(), s);
}

TEST(Transforms, EmptyImageIsADataError)
{
    Rng r(0);
    EXPECT_THROW(apply(make_transform("norm_256"), Image{}, r), DataError);
}

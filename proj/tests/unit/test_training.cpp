#include "medseg/training.hpp"

#include "fixtures.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <limits>

using namespace medseg;
using Mat = ag::Matrix<double>;

namespace {

const Tokenizer& tokenizer() {
    static const Tokenizer tok(Vocab::build());
    return tok;
}

double text_loss_value(const Mat& logits, const std::vector<int>& targets) {
    ag::ParameterSet<double> ps;
    ag::Graph<double> g(ps);
    return g.scalar(text_loss(g, g.input(logits), targets));
}

double mask_loss_value(const std::vector<Mat>& logits, const std::vector<BinaryMask>& gt, const LossWeights& w) {
    ag::ParameterSet<double> ps;
    ag::Graph<double> g(ps);
    std::vector<ag::Var> vs;
    for (const auto& l : logits) vs.push_back(g.input(l));
    return g.scalar(mask_loss(g, vs, gt, w));
}

ag::Gradients<double> gradient(const Model<double>& m, const PreparedSample& ps, const LossWeights& w) {
    auto grads = ag::Gradients<double>::zeros_like(m.params());
    ag::Graph<double> g(m.params(), &grads);
    g.backward(sample_loss(g, m, ps, w).total);
    return grads;
}

} // namespace

TEST_CASE("text_loss", "[loss]") {
    const int V = tokenizer().vocab().size();
    CHECK(std::abs(text_loss_value(Mat::Zero(5, V), {3, 9, 1, 2, 0}) - std::log(static_cast<double>(V))) <= 1e-9);

    Mat sharp = Mat::Zero(2, 6);
    sharp(0, 2) = 20;
    sharp(1, 5) = 20;
    CHECK(text_loss_value(sharp, {2, 5}) < 1e-6);

    // Three supervised rows over a 3-word vocabulary, by hand.
    Mat z(3, 3);
    z << 1.0, 2.0, 3.0, 0.5, 0.5, -1.0, -2.0, 0.0, 2.0;
    double expect = 0;
    const int tgt[] = {2, 0, 1};
    for (int r = 0; r < 3; ++r) {
        double den = 0;
        for (int c = 0; c < 3; ++c) den += std::exp(z(r, c));
        expect += -std::log(std::exp(z(r, tgt[r])) / den);
    }
    expect /= 3;
    CHECK(std::abs(text_loss_value(z, {2, 0, 1}) - expect) <= 1e-9);

    SECTION("supervision mask") {
        ag::ParameterSet<double> ps;
        ag::Graph<double> g(ps);
        const double masked = g.scalar(text_loss(g, g.input(z), {2, 0, 1}, {true, false, true}));
        CHECK(masked == Catch::Approx(text_loss_value(z, {2, -1, 1})).epsilon(1e-15));
        CHECK_THROWS_AS(text_loss(g, g.input(z), {2, 0}, {true, false}), ShapeError);
    }
    SECTION("nothing supervised") { CHECK(text_loss_value(z, {-1, -1, -1}) == 0.0); }
}

TEST_CASE("mask_loss", "[loss]") {
    BinaryMask ones(2, 2, 1);
    LossWeights w;
    SECTION("half probability on an all-ones 2x2 target") {
        LossWeights dice_only{1, 1, 0.0, 1.0, 1.0};
        LossWeights bce_only{1, 1, 1.0, 0.0, 1.0};
        CHECK(std::abs(mask_loss_value({Mat::Zero(4, 1)}, {ones}, dice_only) - 2.0 / 7.0) <= 1e-12);
        CHECK(std::abs(mask_loss_value({Mat::Zero(4, 1)}, {ones}, bce_only) - std::log(2.0)) <= 1e-12);
        CHECK(mask_loss_value({Mat::Zero(4, 1)}, {ones}, w) == Catch::Approx(2.0 * std::log(2.0) + 0.5 * 2.0 / 7.0).epsilon(1e-14));
    }
    SECTION("confident correct logits") {
        BinaryMask gt(2, 2);
        gt.values = {1, 0, 0, 1};
        Mat z(4, 1);
        z << 20, -20, -20, 20;
        CHECK(mask_loss_value({z}, {gt}, w) < 1e-6);
    }
    SECTION("mean over slots") {
        const double a = mask_loss_value({Mat::Zero(4, 1)}, {ones}, w);
        const double b = mask_loss_value({Mat::Constant(4, 1, 3.0)}, {ones}, w);
        CHECK(mask_loss_value({Mat::Zero(4, 1), Mat::Constant(4, 1, 3.0)}, {ones, ones}, w) == Catch::Approx((a + b) / 2).epsilon(1e-14));
    }
    SECTION("empty lists") { CHECK(mask_loss_value({}, {}, w) == 0.0); }
    SECTION("shape errors") {
        CHECK_THROWS_AS(mask_loss_value({Mat::Zero(3, 1)}, {ones}, w), ShapeError);
        CHECK_THROWS_AS(mask_loss_value({}, {ones}, w), ShapeError);
    }
}

TEST_CASE("total_loss is linear in the weights", "[loss]") {
    {
        ag::ParameterSet<double> ps;
        ag::Graph<double> g(ps);
        auto t = g.input(Mat::Constant(1, 1, 0.7));
        auto m = g.input(Mat::Constant(1, 1, 0.3));
        CHECK(g.scalar(combine_losses(g, t, m, LossWeights{})) == Catch::Approx(1.0).epsilon(1e-15));
    }
    const auto s = fixture::tiny_sample();
    const auto ps = prepare(tokenizer(), s);
    Model<double> m(ModelConfig::tiny(tokenizer().vocab().size()));
    const auto base = total_loss(m, ps, LossWeights{});
    for (auto [lt, lm] : {std::pair{0.0, 1.0}, {1.0, 0.0}, {0.3, 2.5}, {4.0, 0.25}}) {
        LossWeights w;
        w.lambda_t = lt;
        w.lambda_m = lm;
        const auto l = total_loss(m, ps, w);
        CHECK(std::abs(l.total - (lt * base.text + lm * base.mask)) <= 1e-12);
        CHECK(l.text == base.text);
        CHECK(l.mask == base.mask);
    }
    LossWeights no_mask;
    no_mask.lambda_m = 0;
    CHECK(total_loss(m, ps, no_mask).total == base.text);
}

TEST_CASE("doubling lambda_m doubles only the mask part of the gradient", "[loss]") {
    const auto s = fixture::tiny_sample();
    const auto ps = prepare(tokenizer(), s);
    Model<double> m(ModelConfig::tiny(tokenizer().vocab().size()));
    LossWeights one;
    LossWeights two;
    two.lambda_m = 2.0;
    LossWeights mask_only;
    mask_only.lambda_t = 0.0;
    const auto g1 = gradient(m, ps, one);
    const auto g2 = gradient(m, ps, two);
    const auto gm = gradient(m, ps, mask_only);
    for (std::size_t p = 0; p < m.params().size(); ++p) {
        const double scale = std::max(1.0, g2.grads[p].cwiseAbs().maxCoeff());
        INFO(m.params().name(p));
        CHECK((g2.grads[p] - g1.grads[p] - gm.grads[p]).cwiseAbs().maxCoeff() <= 1e-12 * scale);
        if (m.params().name(p).rfind("pg.", 0) == 0) {
            CHECK((g2.grads[p] - 2.0 * g1.grads[p]).cwiseAbs().maxCoeff() <= 1e-12 * scale);
        }
    }
}

TEST_CASE("grad_check on the tiny config", "[gradcheck]") {
    const auto s = fixture::tiny_sample();
    const auto ps = prepare(tokenizer(), s);
    Model<double> m(ModelConfig::tiny(tokenizer().vocab().size()));
    const auto r = grad_check(m, ps, 1e-5);
    CHECK(r.coordinates >= 200);
    CHECK(r.per_group.size() >= 8);
    CHECK(r.max_rel_error <= 1e-3);
    const auto bad = grad_check(m, ps, 1e-5, {}, 200, 0, ag::GradientFault::gelu_derivative);
    CHECK(bad.max_rel_error > 1e-1);
    CHECK_THROWS_AS(grad_check(m, ps, 0.0), InvalidArgument);
}

TEST_CASE("batch order is a reshuffled permutation per epoch", "[train]") {
    BatchStream a(5, 3);
    BatchStream b(5, 3);
    auto e1 = a.next(5);
    CHECK(e1 == b.next(5));
    auto sorted = e1;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4});
    auto e2 = a.next(5);
    std::sort(e2.begin(), e2.end());
    CHECK(e2 == sorted);
}

TEST_CASE("train", "[train]") {
    const std::vector<Sample> data{fixture::tiny_sample()};
    auto cfg = ModelConfig::tiny(tokenizer().vocab().size());
    TrainConfig tc;
    tc.steps = 4;
    tc.batch_size = 1;
    tc.eval_every = 2;
    tc.learning_rate = 1e-3;

    SECTION("step 0 loss is the initial total_loss and training is reproducible") {
        Model<float> a(cfg);
        const auto init = total_loss(a, prepare(tokenizer(), data[0]), LossWeights{});
        const auto ra = train(a, tokenizer(), data, tc);
        REQUIRE(ra.log.size() == 3); // steps 0, 2 and the last
        CHECK(ra.log[0].step == 0);
        CHECK(ra.log[0].loss_total == init.total);
        CHECK(ra.log[0].dsc_train.has_value());
        Model<float> b(cfg);
        train(b, tokenizer(), data, tc);
        for (std::size_t p = 0; p < a.params().size(); ++p) REQUIRE(a.params().value(p) == b.params().value(p));
        CHECK(total_loss(a, prepare(tokenizer(), data[0]), LossWeights{}).total < init.total);
    }
    SECTION("non-finite loss aborts") {
        Model<float> a(cfg);
        a.params().value(a.params().index("pg.decoder.refine2_b"))(0, 0) = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(train(a, tokenizer(), data, tc), NonFiniteLoss);
    }
    SECTION("writes a metrics log, vocab and a loadable checkpoint") {
        namespace fs = std::filesystem;
        const auto dir = fs::temp_directory_path() / "medseg_train_test";
        fs::remove_all(dir);
        tc.checkpoint_dir = dir.string();
        Model<float> a(cfg);
        train(a, tokenizer(), data, tc);
        const auto lines = fileio::read_lines(dir / kMetricsLogName);
        REQUIRE(lines.size() == 3);
        const auto j = nlohmann::json::parse(lines[1]);
        for (const char* k : {"step", "loss_total", "loss_text", "loss_mask", "dsc_train"}) CHECK(j.contains(k));
        CHECK(load_vocab((dir / kVocabName).string()) == tokenizer().vocab());
        auto ck = load_checkpoint<float>((dir / kCheckpointName).string());
        CHECK(ck.meta.at("step") == 4);
        CHECK(ck.model.params().value(0) == a.params().value(0));
        fs::remove_all(dir);
    }
    SECTION("invalid configuration") {
        Model<float> a(cfg);
        tc.batch_size = 0;
        CHECK_THROWS_AS(train(a, tokenizer(), data, tc), InvalidArgument);
        tc.batch_size = 1;
        CHECK_THROWS_AS(train(a, tokenizer(), std::vector<Sample>{}, tc), EmptyEvalSet);
    }
}

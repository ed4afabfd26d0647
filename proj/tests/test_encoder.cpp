#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icubert/encoder.hpp"
#include "icubert/gradcheck.hpp"
#include "icubert/io.hpp"
#include "support.hpp"

using namespace icubert;

namespace {

ModelConfig tiny_config(int layers = 2, int hidden = 8, int heads = 2, int max_len = 16) {
    ModelConfig c;
    c.encoder.layers = layers;
    c.encoder.hidden = hidden;
    c.encoder.heads = heads;
    c.encoder.ffn_dim = 12;
    c.encoder.max_seq_len = max_len;
    c.encoder.dropout = 0.1;
    c.embedder.pretrained_dim = 6;
    c.embedder.hidden = hidden;
    c.embedder.window_minutes = 60;
    c.heads.feature_vocab = 10;
    c.heads.value_vocab = 5;
    return c;
}

Mat<double> random_input(Rng& rng, int n, int d) {
    Mat<double> x(n, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    return x;
}

std::vector<std::uint8_t> mask_with(int real, int n) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n), 0);
    std::fill(m.begin(), m.begin() + real, 1);
    return m;
}

}  // namespace

TEST_CASE("config validation") {
    auto c = tiny_config();
    c.encoder.heads = 3;
    test::check_errc([&] { c.validate(); }, Errc::shape_mismatch);
    c = tiny_config();
    c.embedder.hidden = 4;
    test::check_errc([&] { c.validate(); }, Errc::shape_mismatch);
    c = tiny_config();
    c.encoder.layers = 0;
    test::check_errc([&] { c.validate(); }, Errc::shape_mismatch);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("identical sequences give identical outputs") {
    const auto p = init_model<double>(tiny_config(), 1);
    Rng rng(2);
    const Mat<double> x = random_input(rng, 10, 8);
    const auto out = forward<double>(p, {x, x}, {mask_with(7, 10), mask_with(7, 10)}, Mode::eval, nullptr);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == out[1]);
    CHECK(out[0].rows() == 10);
    CHECK(out[0].cols() == 8);
}

TEST_CASE("shape errors") {
    const auto p = init_model<double>(tiny_config(), 1);
    Rng rng(3);
    const Mat<double> x = random_input(rng, 10, 8);
    test::check_errc([&] { encoder_forward<double>(p, x, mask_with(3, 9), Mode::eval, nullptr); }, Errc::shape_mismatch);
    test::check_errc([&] { encoder_forward<double>(p, random_input(rng, 10, 6), mask_with(3, 10), Mode::eval, nullptr); },
                     Errc::shape_mismatch);
    test::check_errc([&] { encoder_forward<double>(p, random_input(rng, 17, 8), mask_with(3, 17), Mode::eval, nullptr); },
                     Errc::shape_mismatch);
    test::check_errc([&] { forward<double>(p, {x}, {}, Mode::eval, nullptr); }, Errc::shape_mismatch);
}

TEST_CASE("CLS-only input stays finite") {
    const auto p = init_model<double>(tiny_config(), 4);
    Rng rng(5);
    const auto y = encoder_forward<double>(p, random_input(rng, 16, 8), mask_with(1, 16), Mode::eval, nullptr);
    CHECK(y.allFinite());
}

TEST_CASE("permuting real tokens permutes outputs and fixes CLS") {
    const auto p = init_model<double>(tiny_config(), 6);
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const int real = 2 + static_cast<int>(rng.below(14));
        const Mat<double> x = random_input(rng, 16, 8);
        const auto mask = mask_with(real, 16);
        std::vector<int> perm(static_cast<std::size_t>(real - 1));
        std::iota(perm.begin(), perm.end(), 1);
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        Mat<double> xp = x;
        for (std::size_t i = 0; i < perm.size(); ++i) xp.row(static_cast<Eigen::Index>(i + 1)) = x.row(perm[i]);
        const auto y = encoder_forward<double>(p, x, mask, Mode::eval, nullptr);
        const auto yp = encoder_forward<double>(p, xp, mask, Mode::eval, nullptr);
        CHECK((y.row(0) - yp.row(0)).cwiseAbs().maxCoeff() <= 1e-9);
        for (std::size_t i = 0; i < perm.size(); ++i) {
            CHECK((yp.row(static_cast<Eigen::Index>(i + 1)) - y.row(perm[i])).cwiseAbs().maxCoeff() <= 1e-9);
        }
        const auto cls = cls_output<double>({y});
        const auto clsp = cls_output<double>({yp});
        CHECK((cls - clsp).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("PAD rows do not influence real rows") {
    const auto p = init_model<double>(tiny_config(), 8);
    Rng rng(9);
    const Mat<double> x = random_input(rng, 16, 8);
    Mat<double> other = x;
    other.bottomRows(6) = random_input(rng, 6, 8);
    const auto mask = mask_with(10, 16);
    const auto a = encoder_forward<double>(p, x, mask, Mode::eval, nullptr);
    const auto b = encoder_forward<double>(p, other, mask, Mode::eval, nullptr);
    CHECK((a.topRows(10) - b.topRows(10)).cwiseAbs().maxCoeff() <= 1e-12);
    const auto trimmed = encoder_forward<double>(p, x.topRows(10), mask_with(10, 10), Mode::eval, nullptr);
    CHECK((a.topRows(10) - trimmed).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("attention rows sum to one over admissible keys") {
    const auto p = init_model<double>(tiny_config(3, 12, 3), 10);
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int real = 1 + static_cast<int>(rng.below(16));
        EncoderCache<double> cache;
        encoder_forward<double>(p, random_input(rng, 16, 12), mask_with(real, 16), Mode::eval, nullptr, &cache);
        REQUIRE(cache.layers.size() == 3);
        for (const auto& layer : cache.layers) {
            REQUIRE(layer.attention.size() == 3);
            for (const auto& a : layer.attention) {
                for (Eigen::Index i = 0; i < a.rows(); ++i) {
                    CHECK(std::abs(a.row(i).leftCols(real).sum() - 1.0) <= 1e-6);
                    if (real < 16) CHECK(a.row(i).rightCols(16 - real).cwiseAbs().maxCoeff() == 0.0);
                }
            }
        }
    }
}

TEST_CASE("eval forward is deterministic; train forward follows the rng") {
    const auto p = init_model<double>(tiny_config(), 12);
    Rng rng(13);
    const Mat<double> x = random_input(rng, 12, 8);
    const auto mask = mask_with(12, 12);
    CHECK(encoder_forward<double>(p, x, mask, Mode::eval, nullptr) == encoder_forward<double>(p, x, mask, Mode::eval, nullptr));
    Rng a(1), b(1);
    const auto ta = encoder_forward<double>(p, x, mask, Mode::train, &a);
    CHECK(ta == encoder_forward<double>(p, x, mask, Mode::train, &b));
    CHECK(ta != encoder_forward<double>(p, x, mask, Mode::eval, nullptr));
}

TEST_CASE("reconstruction head shapes") {
    const auto p = init_model<double>(tiny_config(1, 8, 2, 8), 14);
    Rng rng(15);
    const std::vector<Mat<double>> batch{random_input(rng, 8, 8), random_input(rng, 8, 8)};
    const auto hidden = forward<double>(p, batch, {mask_with(8, 8), mask_with(5, 8)}, Mode::eval, nullptr);
    for (const auto& h : hidden) {
        const auto out = mlvm_outputs<double>(p, h);
        CHECK(out.feature_logits.rows() == 8);
        CHECK(out.feature_logits.cols() == 10);
        CHECK(out.cat_logits.rows() == 8);
        CHECK(out.cat_logits.cols() == 5);
        CHECK(out.cont.rows() == 8);
        CHECK(out.cont.cols() == 1);
        for (Eigen::Index i = 0; i < 8; ++i) {
            const auto row = out.feature_logits.row(i);
            const double m = row.maxCoeff();
            const double z = (row.array() - m).exp().sum();
            CHECK(std::abs((row.array() - m).exp().sum() / z - 1.0) <= 1e-6);
        }
    }
    const auto cls = cls_output(hidden);
    CHECK(cls.rows() == 2);
    CHECK(cls.row(0) == hidden[0].row(0));
    CHECK(cls.row(1) == hidden[1].row(0));
}

TEST_CASE("zero heads return their bias") {
    auto p = init_model<double>(tiny_config(1, 8, 2, 8), 16);
    p.heads.feature.weight.setZero();
    p.heads.feature.bias.setConstant(0.5);
    p.heads.cat_value.weight.setZero();
    p.heads.cat_value.bias.setConstant(-1.5);
    p.heads.cont_value.weight.setZero();
    p.heads.cont_value.bias.setConstant(2.0);
    const auto out = mlvm_outputs<double>(p, Mat<double>::Zero(4, 8));
    CHECK((out.feature_logits.array() == 0.5).all());
    CHECK((out.cat_logits.array() == -1.5).all());
    CHECK((out.cont.array() == 2.0).all());
}

TEST_CASE("task head replaces the reconstruction heads") {
    auto p = init_model<double>(tiny_config(), 17);
    install_task_head(p, 3, 0.5, 18);
    CHECK(p.config.heads.mode == HeadMode::finetune);
    test::check_errc([&] { mlvm_outputs<double>(p, Mat<double>::Zero(4, 8)); }, Errc::mode_mismatch);
    std::vector<std::string> names;
    p.visit([&](const std::string& n, Mat<double>&) { names.push_back(n); });
    CHECK(std::find(names.begin(), names.end(), "heads.task.weight") != names.end());
    CHECK(std::find(names.begin(), names.end(), "heads.feature.weight") == names.end());
    const Mat<double> logits = task_forward<double>(p, Mat<double>::Ones(2, 8), Mode::eval, nullptr);
    CHECK(logits.rows() == 2);
    CHECK(logits.cols() == 3);
}

TEST_CASE("quadratic toy loss gradcheck") {
    Rng rng(19);
    Affine<double> layer = init_affine<double>(4, 3, rng);
    const Mat<double> x = random_input(rng, 5, 4);
    const Mat<double> target = random_input(rng, 5, 3);
    auto loss = [&] { return 0.5 * (affine_forward(layer, x) - target).squaredNorm(); };
    Affine<double> grad{Mat<double>::Zero(4, 3), Mat<double>::Zero(1, 3)};
    affine_backward<double>(layer, x, affine_forward(layer, x) - target, grad);
    GradCheckOptions opts;
    opts.epsilon = 1e-4;
    opts.tolerance = 1e-7;
    const auto report = grad_check(loss, {{"w", &layer.weight, &grad.weight}, {"b", &layer.bias, &grad.bias}}, opts);
    CHECK(report.passed);
    CHECK(report.max_rel_err <= 1e-7);
    CHECK(report.checked == 15);
}

TEST_CASE("corrupted gradient is caught") {
    Rng rng(20);
    Affine<double> layer = init_affine<double>(3, 2, rng);
    const Mat<double> x = random_input(rng, 4, 3);
    auto loss = [&] { return 0.5 * affine_forward(layer, x).squaredNorm(); };
    Affine<double> grad{Mat<double>::Zero(3, 2), Mat<double>::Zero(1, 2)};
    affine_backward(layer, x, affine_forward(layer, x), grad);
    grad.weight(1, 1) += 0.1;
    try {
        grad_check(loss, {{"w", &layer.weight, &grad.weight}, {"b", &layer.bias, &grad.bias}});
        FAIL("no mismatch");
    } catch (const GradMismatch& e) {
        CHECK(e.code() == Errc::grad_mismatch);
        CHECK(e.param() == "w");
        CHECK(e.rel_err() > 1e-4);
    }
    GradCheckOptions quiet;
    quiet.throw_on_failure = false;
    const auto report = grad_check(loss, {{"w", &layer.weight, &grad.weight}}, quiet);
    CHECK_FALSE(report.passed);
    REQUIRE_FALSE(report.worst.empty());
    CHECK(report.worst[0].index == 1 * 2 + 1);
}

TEST_CASE("tiny model gradcheck covers every parameter group") {
    ModelCheckConfig cfg;
    const auto report = check_model_gradients(cfg);
    CHECK(report.passed());
    CHECK(report.pretrain.max_rel_err <= 1e-4);
    CHECK(report.finetune.max_rel_err <= 1e-4);

    auto model = init_model<double>(tiny_config(1, 8, 2, 6), 0);
    for (const auto* r : {&report.pretrain}) {
        model.visit([&](const std::string& name, Mat<double>&) { CHECK_MESSAGE(r->max_by_param.count(name), name); });
    }
    CHECK(report.finetune.max_by_param.count("heads.task.weight"));
    CHECK(report.finetune.max_by_param.count("embedder.time_table"));
}

TEST_CASE("checkpoint round-trip is bitwise") {
    test::TempDir dir;
    auto p = init_model<float>(tiny_config(), 21);
    const std::string path = dir.file("model.ckpt");
    save_checkpoint(p, path);
    const auto back = load_checkpoint(path);
    CHECK(compatible(back.config, p.config));
    CHECK(encode_checkpoint(back) == read_file(path));
    std::vector<Mat<float>> a, b;
    p.visit([&](const std::string&, const Mat<float>& m) { a.push_back(m); });
    back.visit([&](const std::string&, const Mat<float>& m) { b.push_back(m); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].size() == b[i].size());
        CHECK(std::memcmp(a[i].data(), b[i].data(), sizeof(float) * static_cast<std::size_t>(a[i].size())) == 0);
    }

    install_task_head(p, 2, 0.5, 3);
    save_checkpoint(p, path);
    const auto task = load_checkpoint(path);
    CHECK(task.config.heads.mode == HeadMode::finetune);
    CHECK(task.heads.task.weight == p.heads.task.weight);
}

TEST_CASE("checkpoint guards") {
    test::TempDir dir;
    const auto p = init_model<float>(tiny_config(), 22);
    const std::string path = dir.file("model.ckpt");
    save_checkpoint(p, path);
    auto wrong = tiny_config(2, 12, 2);
    test::check_errc([&] { load_checkpoint(path, wrong); }, Errc::config_mismatch);
    CHECK_NOTHROW(load_checkpoint(path, tiny_config()));

    const std::string bytes = encode_checkpoint(p);
    for (std::size_t cut : {std::size_t{2}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        test::check_errc([&] { decode_checkpoint(std::string_view(bytes).substr(0, cut)); }, Errc::format_error);
    }
    std::string bad = bytes;
    bad[0] = 'X';
    test::check_errc([&] { decode_checkpoint(bad); }, Errc::format_error);
    test::check_errc([&] { decode_checkpoint(bytes + "junk"); }, Errc::format_error);
    test::check_errc([] { load_checkpoint("/nonexistent/model.ckpt"); }, Errc::io_error);
}

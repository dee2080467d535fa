#include <doctest.h>

#include <numeric>
#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "solens/effects.hpp"
#include "solens/errors.hpp"

using namespace solens;
using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using Eigen::VectorXf;

namespace {

const WeightBundle& toy() {
    static const WeightBundle w = generate_toy(42, toy_spec());
    return w;
}

const std::vector<ImageTrace>& toy_traces() {
    static const std::vector<ImageTrace> t = trace_images(toy(), oracle::random_images(11, 8, 16));
    return t;
}

double max_diff(const VectorXf& a, const VectorXd& b) { return (a.cast<double>() - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("second_order matches the literal summation") {
    for (bool shares : {false, true})
        for (int layer : {0, 1, 2}) {
            EffectOptions o;
            o.bias_shares = shares;
            const auto field = second_order(toy(), toy_traces(), layer, o);
            double worst = 0.0;
            for (int i = 0; i < 8; ++i)
                for (int n = 0; n < toy().spec.width; ++n)
                    worst = std::max(worst, max_diff(field.phi_at(i, n),
                                                     oracle::second_order_loop(toy(), toy_traces()[i], layer, n, shares)));
            CAPTURE(layer);
            CAPTURE(shares);
            CHECK(worst < 1e-5);
        }
}

TEST_CASE("zero activations without bias shares give zero effects") {
    std::vector<ImageTrace> traces = toy_traces();
    for (auto& t : traces) t.post_gelu[1].setZero();
    const auto field = second_order(toy(), traces, 1, EffectOptions{false});
    CHECK(field.norms.maxCoeff() == 0.0f);
}

TEST_CASE("single path, single token reduces to P W_VO w") {
    ModelSpec s = toy_spec();
    s.layers = 2;
    s.heads = 1;
    WeightBundle w = generate_toy(5, s);
    w.layers[1].ln1_gamma.setOnes();
    w.layers[1].ln1_beta.setZero();
    w.ln_post_gamma.setOnes();
    w.ln_post_beta.setZero();

    const int T = s.tokens(), star = 5, neuron = 9;
    ImageTrace tr;
    tr.post_gelu.assign(2, MatrixXf::Zero(T, s.width));
    tr.post_gelu[0](star, neuron) = 1.0f;
    tr.attn_class_row.assign(2, MatrixXf::Zero(1, T));
    tr.attn_class_row[1](0, star) = 1.0f;
    tr.ln_mu = MatrixXf::Zero(s.ln_count(), T);
    tr.ln_sigma = MatrixXf::Ones(s.ln_count(), T);
    tr.msa_class_out = MatrixXf::Zero(s.layers, s.d_model);
    tr.representation = VectorXf::Zero(s.d_out);
    tr.class_token_prelnpost = VectorXf::Zero(s.d_model);

    const std::vector<int> one{neuron};
    const auto field = second_order(w, std::span(&tr, 1), 0, one, EffectOptions{false});
    const VectorXf expected = w.proj * compute_vo(w, 1, 0) * w.layers[0].W_out.col(neuron);
    CHECK((field.phi_at(0, 0) - expected).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("last layer has bias-only effects") {
    const int last = toy().spec.layers - 1;
    CHECK(second_order(toy(), toy_traces(), last, EffectOptions{false}).norms.maxCoeff() == 0.0f);
    CHECK_NOTHROW(second_order(toy(), toy_traces(), last, EffectOptions{true}));
}

TEST_CASE("neuron enumeration order and job count do not matter") {
    std::vector<int> fwd(toy().spec.width), rev(toy().spec.width);
    std::iota(fwd.begin(), fwd.end(), 0);
    std::iota(rev.rbegin(), rev.rend(), 0);
    EffectOptions one;
    one.jobs = 1;
    EffectOptions many;
    many.jobs = 5;
    const auto a = second_order(toy(), toy_traces(), 1, fwd, one);
    const auto b = second_order(toy(), toy_traces(), 1, rev, many);
    for (int i = 0; i < 8; ++i)
        for (int n = 0; n < toy().spec.width; ++n) CHECK(a.phi_at(i, n) == b.phi_at(i, b.slot_of(n)));
    const auto c = second_order(toy(), toy_traces(), 1, fwd, many);
    CHECK(a.phi == c.phi);
}

TEST_CASE("frozen path map is affine and agrees with second_order") {
    const ImageTrace& tr = toy_traces()[0];
    const int layer = 1, T = toy().spec.tokens(), D = toy().spec.d_model;
    const FrozenPathMap shares(toy(), tr, layer, true);
    const FrozenPathMap plain(toy(), tr, layer, false);
    for (int k = 0; k < 5; ++k) {
        const MatrixXd x = oracle::random_gaussian(100 + k, T, D), y = oracle::random_gaussian(200 + k, T, D);
        const MatrixXd zero = MatrixXd::Zero(T, D);
        CHECK((shares.apply(x + y) - shares.apply(x) - shares.apply(y) + shares.apply(zero)).norm() < 1e-5);
    }
    CHECK(plain.apply(MatrixXd::Zero(T, D)).norm() == 0.0);

    const auto field = second_order(toy(), std::span(&tr, 1), layer, EffectOptions{false});
    MatrixXd total = MatrixXd::Zero(T, D);
    VectorXd sum = VectorXd::Zero(toy().spec.d_out);
    for (int n = 0; n < toy().spec.width; ++n) {
        const MatrixXd contrib = tr.post_gelu[layer].col(n).cast<double>() *
                                 toy().layers[layer].W_out.col(n).cast<double>().transpose();
        CHECK(max_diff(field.phi_at(0, n), plain.apply(contrib)) < 1e-5);
        total += contrib;
        sum += field.phi_at(0, n).cast<double>();
    }
    CHECK((plain.apply(total) - sum).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("first-order effects") {
    const int layer = 2;
    SUBCASE("p0 = 0 gives zero") {
        std::vector<ImageTrace> traces = toy_traces();
        traces[0].post_gelu[layer](0, 4) = 0.0f;
        CHECK(first_order_neuron(toy(), traces, layer, 4).row(0).norm() == 0.0f);
    }
    SUBCASE("sum over neurons plus bias equals the MLP class-token write") {
        const auto& L = toy().layers[layer];
        for (int i = 0; i < 3; ++i) {
            const auto& tr = toy_traces()[i];
            const float sigma_f = tr.ln_sigma(toy().spec.ln_post(), 0);
            VectorXd sum = (toy().proj * (toy().ln_post_gamma.cwiseProduct(L.b_out) / sigma_f)).cast<double>();
            for (int n = 0; n < toy().spec.width; ++n)
                sum += first_order_neuron(toy(), std::span(&tr, 1), layer, n).row(0).transpose().cast<double>();
            const VectorXf write = L.W_out * tr.post_gelu[layer].row(0).transpose() + L.b_out;
            const VectorXf expected = toy().proj * (toy().ln_post_gamma.cwiseProduct(write) / sigma_f);
            CHECK(max_diff(expected, sum) < 1e-5);
        }
    }
    SUBCASE("unit direction through identity projection") {
        ModelSpec s = toy_spec();
        s.d_out = s.d_model;
        WeightBundle w = generate_toy(2, s);
        w.proj = MatrixXf::Identity(s.d_model, s.d_model);
        w.layers[0].W_out.col(0) = VectorXf::Unit(s.d_model, 0);
        ImageTrace tr = forward(w, image_at(oracle::random_images(1, 1, 16), 0));
        tr.post_gelu[0](0, 0) = 1.0f;
        const VectorXf e = first_order_neuron(w, std::span(&tr, 1), 0, 0).row(0).transpose();
        const float a = w.ln_post_gamma(0) / tr.ln_sigma(s.ln_post(), 0);
        CHECK(std::abs(e(0) - a) < 1e-6f);
        CHECK(e.tail(s.d_model - 1).norm() == 0.0f);
    }
    SUBCASE("MSA first-order is the projected class-token write") {
        const auto& tr = toy_traces()[1];
        const float sigma_f = tr.ln_sigma(toy().spec.ln_post(), 0);
        const VectorXf expected =
            toy().proj * toy().ln_post_gamma.cwiseProduct(tr.msa_class_out.row(1).transpose()) / sigma_f;
        CHECK((first_order_msa(toy(), tr, 1) - expected).cwiseAbs().maxCoeff() < 1e-6f);
    }
    CHECK_THROWS_AS(first_order_neuron(toy(), toy_traces(), layer, toy().spec.width), ValidationError);
}

TEST_CASE("indirect effects") {
    const auto images = oracle::random_images(11, 8, 16);
    const auto img = image_at(images, 0);
    const auto& tr = toy_traces()[0];
    SUBCASE("means equal to the activations give zero") {
        const VectorXf e = indirect_effect(toy(), img, 1, 3, tr.post_gelu[1].col(3));
        CHECK(e.cwiseAbs().maxCoeff() <= 1e-6f);
    }
    SUBCASE("matches a hand-patched float64 rerun") {
        const MatrixXf means = per_token_means(toy_traces(), 1);
        const VectorXf e = indirect_effect(toy(), img, 1, 3, means.col(3));
        const oracle::HiddenEdit edit{1, 3, means.col(3).cast<double>()};
        const VectorXd expected =
            oracle::forward(toy(), img).representation - oracle::forward(toy(), img, std::span(&edit, 1)).representation;
        CHECK(max_diff(e, expected) < 1e-5);
    }
    SUBCASE("last layer matches a manual residual edit") {
        const int last = toy().spec.layers - 1;
        const VectorXf zero = VectorXf::Zero(toy().spec.tokens());
        const VectorXf e = indirect_effect(toy(), img, last, 7, zero);
        const oracle::HiddenEdit edit{last, 7, VectorXd::Zero(toy().spec.tokens())};
        const VectorXd expected =
            oracle::forward(toy(), img).representation - oracle::forward(toy(), img, std::span(&edit, 1)).representation;
        CHECK(max_diff(e, expected) < 1e-6);
    }
    CHECK_THROWS_AS(indirect_effect(toy(), img, 1, 3, VectorXf::Zero(3)), ValidationError);
}

TEST_CASE("means and norms") {
    SUBCASE("single image mean equals its effect") {
        const auto f = SecondOrderField::from_dense(0, {0}, 1, 3, {1, 2, 3});
        CHECK(mean_over_reference(f) == MatrixXf(f.phi_at(0, 0).transpose()));
    }
    SUBCASE("opposite effects cancel") {
        const auto f = SecondOrderField::from_dense(0, {0}, 2, 2, {1.5f, -2, -1.5f, 2});
        CHECK(mean_over_reference(f).norm() == 0.0f);
    }
    SUBCASE("seeded batch matches two-pass summation and scalar norms") {
        const MatrixXd g = oracle::random_gaussian(13, 100 * 3, 5);
        std::vector<float> phi;
        for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) phi.push_back(static_cast<float>(g(r, c)));
        const auto f = SecondOrderField::from_dense(0, {0, 1, 2}, 100, 5, phi);
        const MatrixXf mean = mean_over_reference(f);
        const MatrixXf norms = effect_norms(f);
        for (int s = 0; s < 3; ++s) {
            for (int c = 0; c < 5; ++c) {
                double first = 0.0;
                for (int i = 0; i < 100; ++i) first += phi[static_cast<std::size_t>((i * 3 + s) * 5 + c)];
                first /= 100.0;
                double correction = 0.0;
                for (int i = 0; i < 100; ++i) correction += phi[static_cast<std::size_t>((i * 3 + s) * 5 + c)] - first;
                CHECK(std::abs(mean(s, c) - (first + correction / 100.0)) < 1e-6);
            }
            for (int i = 0; i < 100; ++i) {
                double sq = 0.0;
                for (int c = 0; c < 5; ++c) sq += double(phi[static_cast<std::size_t>((i * 3 + s) * 5 + c)]) * phi[static_cast<std::size_t>((i * 3 + s) * 5 + c)];
                CHECK(std::abs(norms(i, s) - std::sqrt(sq)) < 1e-5);
            }
        }
    }
    SUBCASE("zero and unit vectors") {
        const auto f = SecondOrderField::from_dense(0, {0}, 2, 3, {0, 0, 0, 0, 1, 0});
        CHECK(effect_norms(f)(0, 0) == 0.0f);
        CHECK(effect_norms(f)(1, 0) == 1.0f);
    }
    CHECK_THROWS_AS(mean_over_reference(SecondOrderField::from_dense(0, {0}, 0, 3, {})), ValidationError);
}

TEST_CASE("TopQ storage keeps the largest vectors and the full mean") {
    EffectOptions full;
    EffectOptions top;
    top.storage = StorageMode::TopQ;
    top.top_q = 3;
    const auto a = second_order(toy(), toy_traces(), 0, full);
    const auto b = second_order(toy(), toy_traces(), 0, top);
    CHECK(b.phi.empty());
    CHECK(a.norms == b.norms);
    CHECK(a.mean == b.mean);
    for (int s = 0; s < a.neuron_count(); s += 9) {
        std::vector<int> ia, ib;
        const MatrixXf va = a.top_vectors(s, 3, &ia);
        const MatrixXf vb = b.top_vectors(s, 3, &ib);
        CHECK(ia == ib);
        CHECK(va == vb);
    }
    CHECK_THROWS_AS(b.top_vectors(0, 4), ValidationError);
}

TEST_CASE("effect fields round-trip through containers") {
    testing::TempDir dir("field");
    EffectOptions top;
    top.storage = StorageMode::TopQ;
    top.top_q = 4;
    for (const auto& o : {EffectOptions{}, top}) {
        const auto f = second_order(toy(), toy_traces(), 1, o);
        const auto path = dir.path() / (o.storage == StorageMode::Full ? "full" : "topq");
        write_container(field_to_container(f), path);
        const auto g = field_from_container(read_container(path));
        CHECK(g.neurons == f.neurons);
        CHECK(g.phi == f.phi);
        CHECK(g.norms == f.norms);
        CHECK(g.mean == f.mean);
        CHECK(g.storage == f.storage);
        if (!f.has_full()) {
            CHECK(g.retained[5].images == f.retained[5].images);
            CHECK(g.retained[5].vectors == f.retained[5].vectors);
        }
    }
}

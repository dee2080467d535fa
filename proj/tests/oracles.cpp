#include "oracles.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>

namespace oracle {

namespace {

struct LnOut {
    MatrixXd y;
    VectorXd mu, sigma;
};

LnOut ln(const MatrixXd& x, const VectorXd& gamma, const VectorXd& beta, double eps) {
    LnOut o{MatrixXd(x.rows(), x.cols()), VectorXd(x.rows()), VectorXd(x.rows())};
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        double mean = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) mean += x(t, j);
        mean /= static_cast<double>(x.cols());
        double var = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(t, j) - mean) * (x(t, j) - mean);
        var /= static_cast<double>(x.cols());
        const double s = std::sqrt(var + eps);
        o.mu(t) = mean;
        o.sigma(t) = s;
        for (Eigen::Index j = 0; j < x.cols(); ++j) o.y(t, j) = (x(t, j) - mean) / s * gamma(j) + beta(j);
    }
    return o;
}

MatrixXd d(const Eigen::MatrixXf& m) { return m.cast<double>(); }
VectorXd d(const Eigen::VectorXf& v) { return v.cast<double>(); }

}  // namespace

RefTrace forward(const solens::WeightBundle& w, std::span<const float> image, std::span<const HiddenEdit> edits) {
    const auto& s = w.spec;
    const int S = s.image_size, p = s.patch_size, g = S / p, T = g * g + 1, D = s.d_model, H = s.heads;
    const int dh = D / H;
    const double eps = s.ln_eps;
    RefTrace out;

    MatrixXd x(T, D);
    for (int j = 0; j < D; ++j) x(0, j) = w.class_embed(j);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            const int tok = 1 + gy * g + gx;
            for (int j = 0; j < D; ++j) {
                double acc = 0.0;
                for (int c = 0; c < 3; ++c)
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            acc += static_cast<double>(w.patch_embed(j, (c * p + py) * p + px)) *
                                   image[static_cast<std::size_t>(c * S * S + (gy * p + py) * S + gx * p + px)];
                x(tok, j) = acc;
            }
        }
    x += d(w.pos_embed);
    x = ln(x, d(w.ln_pre_gamma), d(w.ln_pre_beta), eps).y;

    for (int l = 0; l < s.layers; ++l) {
        const auto& L = w.layers[static_cast<std::size_t>(l)];
        const LnOut a = ln(x, d(L.ln1_gamma), d(L.ln1_beta), eps);
        out.ln1_out.push_back(a.y);
        out.ln1_mu.push_back(a.mu);
        out.ln1_sigma.push_back(a.sigma);
        MatrixXd q = a.y * d(L.W_q).transpose(), k = a.y * d(L.W_k).transpose(), v = a.y * d(L.W_v).transpose();
        for (int t = 0; t < T; ++t) {
            q.row(t) += d(L.b_q).transpose();
            k.row(t) += d(L.b_k).transpose();
            v.row(t) += d(L.b_v).transpose();
        }
        MatrixXd concat = MatrixXd::Zero(T, D);
        MatrixXd attn_row(H, T);
        for (int h = 0; h < H; ++h) {
            for (int t = 0; t < T; ++t) {
                std::vector<double> sc(static_cast<std::size_t>(T));
                double mx = -std::numeric_limits<double>::infinity();
                for (int u = 0; u < T; ++u) {
                    double dot = 0.0;
                    for (int c = 0; c < dh; ++c) dot += q(t, h * dh + c) * k(u, h * dh + c);
                    sc[static_cast<std::size_t>(u)] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, sc[static_cast<std::size_t>(u)]);
                }
                double z = 0.0;
                for (auto& e : sc) z += (e = std::exp(e - mx));
                for (int u = 0; u < T; ++u) {
                    const double pr = sc[static_cast<std::size_t>(u)] / z;
                    if (t == 0) attn_row(h, u) = pr;
                    for (int c = 0; c < dh; ++c) concat(t, h * dh + c) += pr * v(u, h * dh + c);
                }
            }
        }
        out.attn.push_back(attn_row);
        MatrixXd msa = concat * d(L.W_o).transpose();
        for (int t = 0; t < T; ++t) msa.row(t) += d(L.b_o).transpose();
        x += msa;

        const LnOut b = ln(x, d(L.ln2_gamma), d(L.ln2_beta), eps);
        MatrixXd hid = b.y * d(L.W_in).transpose();
        for (int t = 0; t < T; ++t)
            for (int n = 0; n < s.width; ++n) {
                const double u = hid(t, n) + L.b_in(n);
                hid(t, n) = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
            }
        for (const auto& e : edits)
            if (e.layer == l) hid.col(e.neuron) = e.values;
        out.post_gelu.push_back(hid);
        MatrixXd mlp = hid * d(L.W_out).transpose();
        for (int t = 0; t < T; ++t) mlp.row(t) += d(L.b_out).transpose();
        x += mlp;
    }
    const LnOut f = ln(x.topRows(1), d(w.ln_post_gamma), d(w.ln_post_beta), eps);
    out.post_mu = f.mu(0);
    out.post_sigma = f.sigma(0);
    out.representation = d(w.proj) * f.y.row(0).transpose();
    return out;
}

VectorXd second_order_loop(const solens::WeightBundle& w, const solens::ImageTrace& trace, int layer, int neuron,
                           bool bias_shares) {
    const auto& s = w.spec;
    const int T = s.tokens(), D = s.d_model, dh = D / s.heads;
    const MatrixXd P = d(w.proj);
    const VectorXd wn = d(Eigen::VectorXf(w.layers[static_cast<std::size_t>(layer)].W_out.col(neuron)));
    const int post = 2 * s.layers + 1;
    const double sigma_f = trace.ln_sigma(post, 0), mu_f = trace.ln_mu(post, 0);
    const VectorXd gamma_f = d(w.ln_post_gamma), beta_f = d(w.ln_post_beta);
    const VectorXd A_f = gamma_f / sigma_f;
    const VectorXd B_f = mu_f * gamma_f / sigma_f - beta_f;
    const double c_final = static_cast<double>(s.layers) * s.width;

    VectorXd phi = VectorXd::Zero(s.d_out);
    for (int lp = layer + 1; lp < s.layers; ++lp) {
        const auto& L = w.layers[static_cast<std::size_t>(lp)];
        const double c_inner = static_cast<double>(lp) * s.width;
        const int slot = 1 + 2 * lp;
        for (int h = 0; h < s.heads; ++h) {
            MatrixXd vo = MatrixXd::Zero(D, D);
            for (int r = 0; r < D; ++r)
                for (int c = 0; c < D; ++c)
                    for (int k = 0; k < dh; ++k) vo(r, c) += double(L.W_o(r, h * dh + k)) * double(L.W_v(h * dh + k, c));
            for (int i = 0; i < T; ++i) {
                const double weight =
                    double(trace.post_gelu[static_cast<std::size_t>(layer)](i, neuron)) *
                    double(trace.attn_class_row[static_cast<std::size_t>(lp)](h, i));
                const double sig = trace.ln_sigma(slot, i), mu = trace.ln_mu(slot, i);
                VectorXd inner(D);
                for (int j = 0; j < D; ++j) {
                    inner(j) = L.ln1_gamma(j) / sig * wn(j);
                    if (bias_shares) inner(j) -= (mu * L.ln1_gamma(j) / sig - L.ln1_beta(j)) / c_inner;
                }
                VectorXd term = A_f.cwiseProduct(vo * inner);
                if (bias_shares) term -= B_f / c_final;
                phi += weight * (P * term);
            }
        }
    }
    return phi;
}

double best_subset_residual(const MatrixXd& atoms, const VectorXd& r, int m) {
    const int M = static_cast<int>(atoms.rows());
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> pick;
    std::function<void(int)> rec = [&](int start) {
        if (static_cast<int>(pick.size()) == m) {
            MatrixXd A(atoms.cols(), m);
            for (int j = 0; j < m; ++j) A.col(j) = atoms.row(pick[static_cast<std::size_t>(j)]).transpose();
            const VectorXd coef = A.colPivHouseholderQr().solve(r);
            best = std::min(best, (r - A * coef).norm());
            return;
        }
        for (int i = start; i < M; ++i) {
            pick.push_back(i);
            rec(i + 1);
            pick.pop_back();
        }
    };
    rec(0);
    return best;
}

VectorXd leading_eigenvector(const MatrixXd& rows, const VectorXd& center) {
    const MatrixXd c = rows.rowwise() - center.transpose();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c.transpose() * c);
    return es.eigenvectors().col(es.eigenvalues().size() - 1);
}

solens::Tensor random_images(std::uint64_t seed, int n, int size) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    solens::Tensor t({n, 3, size, size});
    for (auto& v : t.data) v = nd(rng);
    return t;
}

MatrixXd random_gaussian(std::uint64_t seed, int rows, int cols) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = nd(rng);
    return m;
}

}  // namespace oracle

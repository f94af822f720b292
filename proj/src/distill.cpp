#include "ntklab/distill.hpp"

#include <cstring>
#include <fstream>
#include <iostream>

#include "ntklab/nn_batch.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

KipLossResult kip_loss(const Mat& K_TS, const Mat& K_SS, const Mat& y_T, const Mat& y_S,
                       const RidgePolicy& ridge) {
    require(K_SS.rows() == K_SS.cols(), "kip_loss: K_SS must be square");
    require(K_TS.cols() == K_SS.rows(), "kip_loss: K_TS/K_SS shape mismatch");
    require(y_S.rows() == K_SS.rows() && y_T.rows() == K_TS.rows(), "kip_loss: label rows mismatch");
    require(y_S.cols() == y_T.cols(), "kip_loss: label class count mismatch");

    Mat u = psd_solve(K_SS, y_S, ridge);  // M x C
    Mat r = K_TS * u - y_T;               // N x C
    KipLossResult out;
    out.loss = 0.5 * r.squaredNorm();
    out.dK_TS = r * u.transpose();
    Mat W = psd_solve(K_SS, Mat(K_TS.transpose() * r), ridge);  // M x C
    out.dy_S = W;
    out.dK_SS = -W * u.transpose();
    return out;
}

RkipLossResult rkip_loss(const Mat& K_TT, const Mat& K_TR, const Mat& K_RR, const Mat& y_T,
                         const Mat& y_R, const RidgePolicy& ridge) {
    require(K_TT.rows() == K_TT.cols() && K_RR.rows() == K_RR.cols(),
            "rkip_loss: kernel blocks must be square");
    require(K_TR.rows() == K_TT.rows() && K_TR.cols() == K_RR.rows(),
            "rkip_loss: K_TR shape mismatch");
    require(y_T.rows() == K_TT.rows() && y_R.rows() == K_RR.rows(), "rkip_loss: label rows mismatch");
    require(y_T.cols() == y_R.cols(), "rkip_loss: label class count mismatch");

    Mat alpha = psd_solve(K_TT, y_T, ridge);    // N x C
    Mat alpha_R = psd_solve(K_RR, y_R, ridge);  // M x C

    RkipLossResult out;
    Mat cross = K_TR * alpha_R;  // N x C
    out.total = (alpha.cwiseProduct(K_TT * alpha)).sum() - 2.0 * (alpha.cwiseProduct(cross)).sum() +
                (alpha_R.cwiseProduct(K_RR * alpha_R)).sum();

    Mat e = y_T - cross;
    out.label_term = (e.cwiseProduct(psd_solve(K_TT, e, ridge))).sum();
    out.variance_term = (alpha_R.cwiseProduct(K_RR * alpha_R)).sum() -
                        (cross.cwiseProduct(psd_solve(K_TT, cross, ridge))).sum();

    out.dK_TR = -2.0 * alpha * alpha_R.transpose();
    Mat abar = 2.0 * (K_RR * alpha_R - K_TR.transpose() * alpha);  // dL/d alpha_R
    Mat s = psd_solve(K_RR, abar, ridge);
    out.dy_R = s;
    out.dK_RR = alpha_R * alpha_R.transpose() - s * alpha_R.transpose();
    return out;
}

namespace {

// Entry partial channels of a kernel block and their contraction with a
// weight matrix into image-space gradients.
struct KernelBlock {
    Mat K;
    Mat dQ, dA, dB;  // partials wrt a.b/d, |a|^2/d, |b|^2/d (analytic backend)
};

class KernelBackend {
   public:
    explicit KernelBackend(const DistillKernel& k) : k_(k) {
        if (k_.kind == DistillKernel::Kind::empirical) {
            require(k_.params.size() == ParamLayout::of(k_.arch).total,
                    "distill: empirical kernel parameter length mismatch");
        }
    }

    bool analytic() const { return k_.kind == DistillKernel::Kind::analytic; }

    Mat eval(const Mat& XA, const Mat& XB) const {
        if (analytic()) return analytic_ntk(XA, XB);
        return empirical_ntk(k_.arch, k_.params, XA, XB);
    }

    KernelBlock eval_with_grads(const Mat& XA, const Mat& XB, bool same_set) const {
        KernelBlock b;
        if (analytic()) {
            AnalyticNtkGrads g = analytic_ntk_with_grads(XA, XB, same_set);
            b.K = std::move(g.K);
            b.dQ = std::move(g.dQ);
            b.dA = std::move(g.dA);
            b.dB = std::move(g.dB);
        } else {
            b.K = empirical_ntk(k_.arch, k_.params, XA, XB);
        }
        return b;
    }

    // Accumulate d(sum_ij W_ij K(a_i, b_j))/d b_j into gXB (M x d). For the
    // same-set block, gradients through both argument slots are included.
    void accumulate_image_grads(const KernelBlock& blk, const Mat& W, const Mat& XA, const Mat& XB,
                                bool same_set, Mat& gXB) const {
        if (analytic()) {
            const double d = static_cast<double>(XA.cols());
            Mat WQ = W.cwiseProduct(blk.dQ);
            gXB.noalias() += WQ.transpose() * XA / d;
            Vec colB = W.cwiseProduct(blk.dB).colwise().sum().transpose();
            gXB.noalias() += colB.asDiagonal() * XB * (2.0 / d);
            if (same_set) {
                gXB.noalias() += WQ * XB / d;  // first-slot chain, a_i = x_i in XB
                Vec rowA = W.cwiseProduct(blk.dA).rowwise().sum();
                gXB.noalias() += rowA.asDiagonal() * XB * (2.0 / d);
            }
            return;
        }
        empirical_image_grads(W, XA, XB, same_set, gXB);
    }

   private:
    // d k(a, b) / d b for the empirical kernel needs the mixed second
    // derivative of the network: for each column b and class c, the weighted
    // tangent r_cb = sum_a W_ab grad f_c(a) enters one input-gradient pass.
    // Quadratic cost; meant for small studies, the analytic backend is the
    // scaled path.
    void empirical_image_grads(const Mat& W, const Mat& XA, const Mat& XB, bool same_set,
                               Mat& gXB) const {
        const ParamLayout L = ParamLayout::of(k_.arch);
        const Act act = Act::of(k_.arch);
        require(k_.arch.activation == Activation::softplus,
                "distill: empirical-kernel image gradients need softplus");
        NetView<double> net(L, k_.params.data());
        Mat XAc = XA.transpose();
        ForwardPass<double> fpa;
        forward_batch<double>(L, net, act, XAc, fpa, true);

        for (Eigen::Index b = 0; b < XB.rows(); ++b) {
            Mat xb = XB.row(b).transpose();
            ForwardPass<double> fpb;
            forward_batch<double>(L, net, act, xb, fpb, true);
            for (int c = 0; c < L.c; ++c) {
                // r = sum_a w_a grad f_c(a); for same-set blocks both slots
                // contribute: w_a = W(a, b) + W(b, a).
                Mat U = Mat::Zero(L.c, XA.rows());
                for (Eigen::Index a = 0; a < XA.rows(); ++a) {
                    double w = W(a, b);
                    if (same_set) w += W(b, a);
                    U(c, a) = w;
                }
                Vec r(L.total);
                vjp_sum_batch<double>(L, net, act, XAc, U, fpa, r);
                NetView<double> dir(L, r.data());
                JvpPass<double> jp;
                jvp_batch<double>(L, net, dir, act, xb, fpb, jp);
                Mat Ub = Mat::Zero(L.c, 1);
                Ub(c, 0) = 1.0;
                Mat gx;
                input_grad_batch<double>(L, net, dir, act, xb, Ub, fpb, jp, gx);
                gXB.row(b) += gx.col(0).transpose();
            }
        }
    }

    DistillKernel k_;
};

Mat balanced_encoded_labels(const LabeledDataset& train, int m) {
    int n_classes = 0;
    for (int c : train.task_class_ids) n_classes = std::max(n_classes, c + 1);
    std::vector<int> ids(m);
    for (int i = 0; i < m; ++i) ids[i] = i % std::max(n_classes, 1);
    if (train.classes() == 1) return encode_labels(LabelScheme::binary, ids, 2);
    return encode_labels(LabelScheme::multiclass, ids, train.classes());
}

}  // namespace

DistillEval eval_distill_loss(const LabeledDataset& train, const Mat& S_images, const Mat& S_labels,
                              DistillLoss loss, const DistillKernel& kernel,
                              const RidgePolicy& ridge) {
    KernelBackend backend(kernel);
    DistillEval out;
    KernelBlock ts = backend.eval_with_grads(train.images, S_images, false);
    KernelBlock ss = backend.eval_with_grads(S_images, S_images, true);
    out.grad_images = Mat::Zero(S_images.rows(), S_images.cols());
    if (loss == DistillLoss::kip) {
        KipLossResult k = kip_loss(ts.K, ss.K, train.labels, S_labels, ridge);
        out.loss = k.loss;
        out.grad_labels = k.dy_S;
        backend.accumulate_image_grads(ts, k.dK_TS, train.images, S_images, false, out.grad_images);
        backend.accumulate_image_grads(ss, k.dK_SS, S_images, S_images, true, out.grad_images);
    } else {
        Mat K_TT = backend.eval(train.images, train.images);
        RkipLossResult r = rkip_loss(K_TT, ts.K, ss.K, train.labels, S_labels, ridge);
        out.loss = r.total;
        out.label_term = r.label_term;
        out.variance_term = r.variance_term;
        out.grad_labels = r.dy_R;
        backend.accumulate_image_grads(ts, r.dK_TR, train.images, S_images, false, out.grad_images);
        backend.accumulate_image_grads(ss, r.dK_RR, S_images, S_images, true, out.grad_images);
    }
    return out;
}

DistilledSet distill(const LabeledDataset& train, const DistillConfig& cfg,
                     const DistillKernel& kernel) {
    require(cfg.m >= 1, "distill: m must be >= 1");
    if (cfg.loss == DistillLoss::rkip)
        require(cfg.m <= train.n(), "distill: rkip needs m <= n (it reconstructs a subset)");
    require(cfg.iters >= 0, "distill: iters must be >= 0");

    DistilledSet ds;
    ds.labels_trainable = cfg.labels_trainable;
    ds.loss_type = cfg.loss == DistillLoss::kip ? "kip" : "rkip";
    ds.kernel_type = kernel.kind == DistillKernel::Kind::analytic ? "analytic" : "empirical";
    ds.seed = cfg.seed;
    ds.normalization = train.normalization;

    Rng rng(cfg.seed);
    if (cfg.init_images_from_train) {
        require(cfg.m <= train.n(), "distill: init_images_from_train needs m <= n");
        ds.images = train.images.topRows(cfg.m);
        ds.labels = train.labels.topRows(cfg.m);
    } else {
        ds.images.resize(cfg.m, train.dim());
        for (Eigen::Index i = 0; i < ds.images.rows(); ++i)
            for (Eigen::Index j = 0; j < ds.images.cols(); ++j)
                ds.images(i, j) = cfg.image_init_std * rng.normal();
        ds.labels = balanced_encoded_labels(train, cfg.m);
    }

    // K_TT is fixed throughout the run; factor it once and keep alpha.
    KernelBackend backend(kernel);
    Mat alpha_T;
    double const_term = 0.0;
    if (cfg.loss == DistillLoss::rkip) {
        Mat K_TT = backend.eval(train.images, train.images);
        alpha_T = psd_solve(K_TT, train.labels, cfg.ridge);
        const_term = (alpha_T.cwiseProduct(K_TT * alpha_T)).sum();
    }
    auto fast_eval = [&](const Mat& S_images, const Mat& S_labels) {
        DistillEval out;
        KernelBlock ts = backend.eval_with_grads(train.images, S_images, false);
        KernelBlock ss = backend.eval_with_grads(S_images, S_images, true);
        out.grad_images = Mat::Zero(S_images.rows(), S_images.cols());
        if (cfg.loss == DistillLoss::kip) {
            KipLossResult k = kip_loss(ts.K, ss.K, train.labels, S_labels, cfg.ridge);
            out.loss = k.loss;
            out.grad_labels = k.dy_S;
            backend.accumulate_image_grads(ts, k.dK_TS, train.images, S_images, false,
                                           out.grad_images);
            backend.accumulate_image_grads(ss, k.dK_SS, S_images, S_images, true, out.grad_images);
            return out;
        }
        Mat alpha_R = psd_solve(ss.K, S_labels, cfg.ridge);
        Mat cross = ts.K * alpha_R;
        out.loss = const_term - 2.0 * (alpha_T.cwiseProduct(cross)).sum() +
                   (alpha_R.cwiseProduct(ss.K * alpha_R)).sum();
        Mat dK_TR = -2.0 * alpha_T * alpha_R.transpose();
        Mat abar = 2.0 * (ss.K * alpha_R - ts.K.transpose() * alpha_T);
        Mat s = psd_solve(ss.K, abar, cfg.ridge);
        out.grad_labels = s;
        Mat dK_RR = alpha_R * alpha_R.transpose() - s * alpha_R.transpose();
        backend.accumulate_image_grads(ts, dK_TR, train.images, S_images, false, out.grad_images);
        backend.accumulate_image_grads(ss, dK_RR, S_images, S_images, true, out.grad_images);
        return out;
    };

    // Elementwise Adam over the flattened (images [, labels]) block.
    Mat m1_i = Mat::Zero(ds.images.rows(), ds.images.cols());
    Mat m2_i = m1_i, m1_l, m2_l;
    if (cfg.labels_trainable) {
        m1_l = Mat::Zero(ds.labels.rows(), ds.labels.cols());
        m2_l = m1_l;
    }
    for (long t = 1; t <= cfg.iters; ++t) {
        DistillEval ev = fast_eval(ds.images, ds.labels);
        if (!std::isfinite(ev.loss))
            throw NumericalError("distill: non-finite loss at iteration " + std::to_string(t));
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
        m1_i = cfg.adam_beta1 * m1_i + (1.0 - cfg.adam_beta1) * ev.grad_images;
        m2_i = cfg.adam_beta2 * m2_i +
               (1.0 - cfg.adam_beta2) * ev.grad_images.cwiseProduct(ev.grad_images);
        ds.images.array() -=
            cfg.adam_lr * (m1_i.array() / c1) / ((m2_i.array() / c2).sqrt() + cfg.adam_eps);
        if (cfg.labels_trainable) {
            m1_l = cfg.adam_beta1 * m1_l + (1.0 - cfg.adam_beta1) * ev.grad_labels;
            m2_l = cfg.adam_beta2 * m2_l +
                   (1.0 - cfg.adam_beta2) * ev.grad_labels.cwiseProduct(ev.grad_labels);
            ds.labels.array() -=
                cfg.adam_lr * (m1_l.array() / c1) / ((m2_l.array() / c2).sqrt() + cfg.adam_eps);
        }
    }
    return ds;
}

Mat rkip_finite_labels(const Mat& K_RR, const Mat& alpha_R) {
    require(K_RR.rows() == K_RR.cols(), "rkip_finite_labels: kernel must be square");
    require(alpha_R.rows() == K_RR.rows(), "rkip_finite_labels: alpha rows mismatch");
    return K_RR * alpha_R;
}

namespace {

double accuracy(const Mat& pred, const LabeledDataset& test) {
    int hits = 0;
    if (test.classes() == 1) {
        for (int i = 0; i < test.n(); ++i)
            if ((pred(i, 0) > 0) == (test.labels(i, 0) > 0)) ++hits;
    } else {
        for (int i = 0; i < test.n(); ++i) {
            Eigen::Index pc, tc;
            pred.row(i).maxCoeff(&pc);
            test.labels.row(i).maxCoeff(&tc);
            if (pc == tc) ++hits;
        }
    }
    return static_cast<double>(hits) / test.n();
}

}  // namespace

double model_accuracy(const Architecture& arch, const Vec& theta, const LabeledDataset& test) {
    require(test.n() >= 1, "model_accuracy: empty test set");
    const ParamLayout L = ParamLayout::of(arch);
    require(theta.size() == L.total, "model_accuracy: parameter length mismatch");
    NetView<double> net(L, theta.data());
    Mat Xc = test.images.transpose();
    ForwardPass<double> fp;
    forward_batch<double>(L, net, Act::of(arch), Xc, fp, false);
    return accuracy(fp.F.transpose(), test);
}

double retrain_eval(const DistilledSet& distilled, EvalMode mode, const RetrainConfig& rc,
                    const LabeledDataset& test) {
    require(test.n() >= 1, "retrain_eval: empty test set");
    require(test.dim() == distilled.images.cols(), "retrain_eval: dimension mismatch");

    if (mode == EvalMode::infinite) {
        Mat K_ts = analytic_ntk(test.images, distilled.images);
        Mat K_ss = analytic_ntk(distilled.images, distilled.images);
        Mat pred = kernel_regression_predict(K_ts, K_ss, distilled.labels, rc.ridge);
        return accuracy(pred, test);
    }

    Architecture arch = rc.arch;
    require(arch.input_dim == distilled.images.cols(), "retrain_eval: arch input_dim mismatch");
    require(arch.output_dim == distilled.labels.cols(), "retrain_eval: arch output_dim mismatch");
    LabeledDataset train_set;
    train_set.images = distilled.images;
    train_set.labels = distilled.labels;
    train_set.raw_class_ids.assign(static_cast<std::size_t>(distilled.m()), 0);
    train_set.task_class_ids.assign(static_cast<std::size_t>(distilled.m()), 0);
    TrainConfig tc = rc.train;
    tc.dynamics =
        mode == EvalMode::finite_linearized ? DynamicsMode::linearized : DynamicsMode::standard;
    Vec theta0 = init_params(arch, rc.init_seed);
    TrainResult tr = train(arch, theta0, train_set, tc);

    const ParamLayout L = ParamLayout::of(arch);
    NetView<double> net(L, tr.theta_final.data());
    Mat Xc = test.images.transpose();
    ForwardPass<double> fp;
    forward_batch<double>(L, net, Act::of(arch), Xc, fp, false);
    Mat pred = fp.F.transpose();
    if (mode == EvalMode::finite_linearized) {
        // f_lin(x) = f0(x) + (theta_f - theta0)^T grad f0(x)
        NetView<double> net0(L, theta0.data());
        ForwardPass<double> fp0;
        forward_batch<double>(L, net0, Act::of(arch), Xc, fp0, true);
        Vec dir = tr.theta_final - theta0;
        NetView<double> dv(L, dir.data());
        JvpPass<double> jp;
        jvp_batch<double>(L, net0, dv, Act::of(arch), Xc, fp0, jp);
        pred = (fp0.F + jp.TF).transpose();
    }
    return accuracy(pred, test);
}

namespace {
constexpr char kDsetMagic[8] = {'N', 'T', 'K', 'D', 'S', 'E', 'T', '1'};
}

void save_distilled(const std::string& path, const DistilledSet& ds) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("save_distilled: cannot open " + path);
    f.write(kDsetMagic, 8);
    const std::uint32_t M = static_cast<std::uint32_t>(ds.images.rows());
    const std::uint32_t d = static_cast<std::uint32_t>(ds.images.cols());
    const std::uint32_t C = static_cast<std::uint32_t>(ds.labels.cols());
    f.write(reinterpret_cast<const char*>(&M), 4);
    f.write(reinterpret_cast<const char*>(&d), 4);
    f.write(reinterpret_cast<const char*>(&C), 4);
    auto write_str = [&f](const std::string& s) {
        const std::uint16_t n = static_cast<std::uint16_t>(s.size());
        f.write(reinterpret_cast<const char*>(&n), 2);
        f.write(s.data(), n);
    };
    write_str(ds.loss_type);
    write_str(ds.kernel_type);
    write_str(ds.normalization);
    f.write(reinterpret_cast<const char*>(&ds.seed), 8);
    const std::uint8_t lt = ds.labels_trainable ? 1 : 0;
    f.write(reinterpret_cast<const char*>(&lt), 1);
    for (std::uint32_t i = 0; i < M; ++i) {
        Eigen::RowVectorXd row = ds.images.row(i);
        f.write(reinterpret_cast<const char*>(row.data()), 8 * d);
    }
    for (std::uint32_t i = 0; i < M; ++i) {
        Eigen::RowVectorXd row = ds.labels.row(i);
        f.write(reinterpret_cast<const char*>(row.data()), 8 * C);
    }
    if (!f) throw NumericalError("save_distilled: write failed for " + path);
}

DistilledSet load_distilled(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("load_distilled: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kDsetMagic, 8) != 0)
        throw ValidationError("load_distilled: bad magic in " + path);
    std::uint32_t M = 0, d = 0, C = 0;
    f.read(reinterpret_cast<char*>(&M), 4);
    f.read(reinterpret_cast<char*>(&d), 4);
    f.read(reinterpret_cast<char*>(&C), 4);
    auto read_str = [&f]() {
        std::uint16_t n = 0;
        f.read(reinterpret_cast<char*>(&n), 2);
        std::string s(n, '\0');
        f.read(s.data(), n);
        return s;
    };
    DistilledSet ds;
    ds.loss_type = read_str();
    ds.kernel_type = read_str();
    ds.normalization = read_str();
    f.read(reinterpret_cast<char*>(&ds.seed), 8);
    std::uint8_t lt = 0;
    f.read(reinterpret_cast<char*>(&lt), 1);
    ds.labels_trainable = lt != 0;
    ds.images.resize(M, d);
    ds.labels.resize(M, C);
    for (std::uint32_t i = 0; i < M; ++i) {
        Eigen::RowVectorXd row(d);
        f.read(reinterpret_cast<char*>(row.data()), 8 * d);
        ds.images.row(i) = row;
    }
    for (std::uint32_t i = 0; i < M; ++i) {
        Eigen::RowVectorXd row(C);
        f.read(reinterpret_cast<char*>(row.data()), 8 * C);
        ds.labels.row(i) = row;
    }
    if (!f) throw ValidationError("load_distilled: truncated file " + path);
    return ds;
}

}  // namespace ntklab

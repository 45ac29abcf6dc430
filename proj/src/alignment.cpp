#include "zsq/alignment.hpp"

#include <cmath>
#include <stdexcept>

namespace zsq::alignment {

void AlignmentConfig::validate() const {
    if (!(lambda > 0.0)) throw std::invalid_argument("alignment: lambda must be positive");
    if (alpha < 0.0) throw std::invalid_argument("alignment: alpha must be >= 0");
}

namespace {

Vec raw_attention(const Tensor& f, std::size_t n) {
    const std::size_t c = f.dim(1), hw = f.dim(2) * f.dim(3);
    Vec a(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = f.data() + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) a[ch] += p[i] * p[i];
    }
    return a;
}

double l2(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

Vec attention_vector(const Tensor& f, std::size_t sample, bool normalize) {
    Vec a = raw_attention(f, sample);
    if (normalize) {
        const double r = l2(a);
        if (r > 1e-12)
            for (double& x : a) x /= r;
    }
    return a;
}

double attention_metric(const Tensor& f_teacher, const Tensor& f_student, std::size_t sample,
                        const AlignmentConfig& cfg) {
    if (!f_teacher.same_shape(f_student))
        throw std::invalid_argument("attention_metric: feature shape mismatch");
    Vec at = attention_vector(f_teacher, sample, cfg.normalize_attention);
    Vec as = attention_vector(f_student, sample, cfg.normalize_attention);
    double d = 0.0;
    for (std::size_t c = 0; c < at.size(); ++c) d += (at[c] - as[c]) * (at[c] - as[c]);
    return d;
}

double kl_term(const Tensor& probs_t, const Tensor& probs_s, Tensor* d_probs_s,
               Tensor* d_probs_t) {
    if (!probs_t.same_shape(probs_s)) throw std::invalid_argument("kl_term: shape mismatch");
    const std::size_t n = probs_t.dim(0), c = probs_t.dim(1);
    const double floor = 1e-12;
    if (d_probs_s) *d_probs_s = Tensor(probs_s.shape());
    if (d_probs_t) *d_probs_t = Tensor(probs_t.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < n * c; ++i) {
        const double pt = probs_t[i], ps = probs_s[i];
        const double lt = std::log(std::max(pt, floor)), ls = std::log(std::max(ps, floor));
        total += pt * (lt - ls);
        if (d_probs_s && ps >= floor)
            (*d_probs_s)[i] = -pt / ps / static_cast<double>(n);
        if (d_probs_t)
            (*d_probs_t)[i] = ((lt - ls) + (pt >= floor ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    return total / static_cast<double>(n);
}

FaBreakdown fa_objective(const std::vector<nn::FeatureEntry>& traces_t,
                         const std::vector<nn::FeatureEntry>& traces_s, const Tensor& probs_t,
                         const Tensor& probs_s, const AlignmentConfig& cfg, FaSeeds* seeds) {
    cfg.validate();
    if (traces_t.size() != traces_s.size())
        throw std::invalid_argument("fa_objective: probe sets differ in size");
    for (std::size_t l = 0; l < traces_t.size(); ++l)
        if (traces_t[l].node != traces_s[l].node)
            throw std::invalid_argument("fa_objective: probe sets differ");
    if (traces_t.empty()) throw std::invalid_argument("fa_objective: empty probe set");

    const std::size_t n = probs_t.dim(0);
    const std::size_t nl = traces_t.size();
    const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(nl));

    FaBreakdown out;
    for (std::size_t l = 0; l < nl; ++l) {
        const Tensor& ft = traces_t[l].feat;
        const Tensor& fs = traces_s[l].feat;
        if (!ft.same_shape(fs)) throw std::invalid_argument("fa_objective: feature shape mismatch");
        Tensor* gs = nullptr;
        Tensor* gt = nullptr;
        if (seeds) {
            gs = &seeds->d_feat_s[traces_s[l].node];
            gt = &seeds->d_feat_t[traces_t[l].node];
            if (gs->empty()) *gs = Tensor(fs.shape());
            if (gt->empty()) *gt = Tensor(ft.shape());
        }
        const std::size_t c = ft.dim(1), hw = ft.dim(2) * ft.dim(3);

        for (std::size_t i = 0; i < n; ++i) {
            if (cfg.mode == AlignmentConfig::Mode::Direct) {
                const double inv_e = 1.0 / static_cast<double>(c * hw);
                double phi = 0.0;
                const double* pt = ft.data() + i * c * hw;
                const double* ps = fs.data() + i * c * hw;
                for (std::size_t k = 0; k < c * hw; ++k) {
                    const double d = pt[k] - ps[k];
                    phi += d * d;
                }
                phi *= inv_e;
                out.fa_term += cfg.lambda * norm * phi;
                if (seeds) {
                    const double scale = cfg.lambda * norm * 2.0 * inv_e;
                    double* os = gs->data() + i * c * hw;
                    double* ot = gt->data() + i * c * hw;
                    for (std::size_t k = 0; k < c * hw; ++k) {
                        os[k] += scale * (ps[k] - pt[k]);
                        ot[k] += scale * (pt[k] - ps[k]);
                    }
                }
                continue;
            }

            Vec at = raw_attention(ft, i), as = raw_attention(fs, i);
            Vec ht = at, hs = as;  // possibly normalized
            double rt = 1.0, rs = 1.0;
            if (cfg.normalize_attention) {
                rt = l2(at);
                rs = l2(as);
                if (rt > 1e-12)
                    for (double& x : ht) x /= rt;
                else
                    for (double& x : ht) x = 0.0;
                if (rs > 1e-12)
                    for (double& x : hs) x /= rs;
                else
                    for (double& x : hs) x = 0.0;
            }
            double phi = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) phi += (ht[ch] - hs[ch]) * (ht[ch] - hs[ch]);
            out.fa_term += cfg.lambda * norm * phi;

            if (seeds) {
                // dphi w.r.t. the raw attention of each side, then through
                // a(ch) = sum f^2
                Vec da_s(c, 0.0), da_t(c, 0.0);
                if (cfg.normalize_attention) {
                    if (rs > 1e-12) {
                        double dot = 0.0;
                        for (std::size_t ch = 0; ch < c; ++ch)
                            dot += (hs[ch] - ht[ch]) * hs[ch];
                        for (std::size_t ch = 0; ch < c; ++ch)
                            da_s[ch] = (2.0 / rs) * ((hs[ch] - ht[ch]) - dot * hs[ch]);
                    }
                    if (rt > 1e-12) {
                        double dot = 0.0;
                        for (std::size_t ch = 0; ch < c; ++ch)
                            dot += (ht[ch] - hs[ch]) * ht[ch];
                        for (std::size_t ch = 0; ch < c; ++ch)
                            da_t[ch] = (2.0 / rt) * ((ht[ch] - hs[ch]) - dot * ht[ch]);
                    }
                } else {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        da_s[ch] = 2.0 * (as[ch] - at[ch]);
                        da_t[ch] = 2.0 * (at[ch] - as[ch]);
                    }
                }
                const double scale = cfg.lambda * norm;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double cs = scale * da_s[ch] * 2.0;
                    const double ct = scale * da_t[ch] * 2.0;
                    const double* pf = fs.data() + (i * c + ch) * hw;
                    const double* tf = ft.data() + (i * c + ch) * hw;
                    double* os = gs->data() + (i * c + ch) * hw;
                    double* ot = gt->data() + (i * c + ch) * hw;
                    for (std::size_t k = 0; k < hw; ++k) {
                        os[k] += cs * pf[k];
                        ot[k] += ct * tf[k];
                    }
                }
            }
        }
    }

    Tensor dps, dpt;
    out.kl = kl_term(probs_t, probs_s, seeds ? &dps : nullptr, seeds ? &dpt : nullptr);
    out.total = out.fa_term + cfg.alpha * out.kl;
    if (seeds) {
        dps *= cfg.alpha;
        dpt *= cfg.alpha;
        seeds->d_probs_s = std::move(dps);
        seeds->d_probs_t = std::move(dpt);
    }
    return out;
}

std::optional<double> grad_cosine_similarity(const std::vector<Tensor>& grads_a,
                                             const std::vector<Tensor>& grads_b) {
    if (grads_a.size() != grads_b.size())
        throw std::invalid_argument("grad_cosine_similarity: collection size mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t t = 0; t < grads_a.size(); ++t) {
        const Tensor& a = grads_a[t];
        const Tensor& b = grads_b[t];
        if (!a.same_shape(b))
            throw std::invalid_argument("grad_cosine_similarity: tensor shape mismatch");
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
    }
    if (na < 1e-30 || nb < 1e-30) return std::nullopt;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace zsq::alignment

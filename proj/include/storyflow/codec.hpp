#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "storyflow/autodiff.hpp"
#include "storyflow/errors.hpp"
#include "storyflow/linalg.hpp"
#include "storyflow/nn.hpp"
#include "storyflow/rng.hpp"
#include "storyflow/scene.hpp"

namespace storyflow {

struct CodecConfig {
    int H = 2;
    int J = 22;
    int O = 1;
    std::vector<int> anchors{4};
    int stride = 4;       // temporal downsampling, two stride-2 convolutions
    int d = 16;           // latent channels per entity token
    int levels = 2;       // residual quantization levels
    int codebook = 64;    // codes per level
    bool quantize = true; // false gives the continuous-autoencoder baseline
    int trunk = 32;       // trunk channels
    int steps = 1800;
    int batch = 6;
    double lr = 2e-3;
    double commit_beta = 0.25;
    double ema = 0.99;
    double recon_threshold = 0.2;  // normalized held-out MSE gate

    int human_dim() const { return J * 9; }
    int object_dim() const {
        int k = 0;
        for (int a : anchors) k += a;
        return O * 7 + 3 * k;
    }
    int entity_dim(int v) const { return v < H ? human_dim() : object_dim(); }
    int n_entities() const { return H + O; }
    int full_dim() const { return flat_dim(H, J, O, anchors); }
    void validate() const {
        if (H < 1 || J < 1 || O < 0) throw ConfigError("codec: bad scene arity");
        if (O > 1) throw ConfigError("codec: single object block expected");
        if (stride != 4) throw ConfigError("codec: stride must be 4 (two stride-2 convs)");
        if (d < 1 || levels < 1 || codebook < 2 || trunk < 2) throw ConfigError("codec: bad sizes");
    }
};

struct LatentSeq {
    Tensor z;                    // (T_lat, V, d), sum of the residual levels
    std::vector<Tensor> levels;  // each (T_lat, V, d)
};

class Codec {
  public:
    CodecConfig cfg;
    ParamStore params;
    std::vector<Tensor> codebooks;  // per level, (K, d)
    Tensor feat_mean, feat_std;     // (D_full,)
    double latent_rms = 1.0;        // RMS of quantized latents over the training set
    bool frozen = false;

    Codec() = default;
    explicit Codec(const CodecConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        init_params(rng);
        feat_mean = Tensor::zeros({cfg.full_dim()});
        feat_std = Tensor::full({cfg.full_dim()}, 1.0);
        codebooks.assign(cfg.levels, Tensor::zeros({cfg.codebook, cfg.d}));
        for (auto& cb : codebooks)
            for (double& v : cb.data) v = 0.5 * rng.normal();
    }

    int t_lat(int N) const { return N / cfg.stride; }

    // Entity v occupies a contiguous column slice of the flat frame vector.
    int entity_col(int v) const { return v < cfg.H ? v * cfg.human_dim() : cfg.H * cfg.human_dim(); }

    // Normalized per-entity features, channel-major: (D_v, N).
    Tensor entity_features(const SceneMotion& m, int v) const {
        int Dv = cfg.entity_dim(v), c0 = entity_col(v);
        Tensor x = Tensor::zeros({Dv, m.N});
        for (int n = 0; n < m.N; ++n)
            for (int i = 0; i < Dv; ++i)
                x.at(i, n) = (m.frames.at(n, c0 + i) - feat_mean.data[c0 + i]) / feat_std.data[c0 + i];
        return x;
    }

    Var encode_entity(Tape& tp, TapeBinding& p, Var x, int v) const {
        const char* in = v < cfg.H ? "enc.in_h.w" : "enc.in_o.w";
        const char* inb = v < cfg.H ? "enc.in_h.b" : "enc.in_o.b";
        Var h = tp.tanh_(tp.conv1d(x, p[in], p[inb], 1, 0));
        h = tp.tanh_(tp.conv1d(h, p["enc.c1.w"], p["enc.c1.b"], 2, 1));
        h = tp.tanh_(tp.conv1d(h, p["enc.c2.w"], p["enc.c2.b"], 2, 1));
        h = tp.tanh_(tp.conv1d(h, p["enc.r.w"], p["enc.r.b"], 1, 1));
        return tp.conv1d(h, p["enc.z.w"], p["enc.z.b"], 1, 0);  // (d, T_lat)
    }

    // Decoder activations are x + tanh(x): the derivative stays within [1, 2],
    // so the decoder Jacobian varies little across latents and a shared
    // block-Toeplitz surrogate tracks it closely.
    Var decode_entity(Tape& tp, TapeBinding& p, Var z_dt, int v) const {
        auto act = [&tp](Var x) { return tp.add(x, tp.tanh_(x)); };
        Var g = act(tp.conv1d(z_dt, p["dec.in.w"], p["dec.in.b"], 1, 0));
        g = act(tp.conv1d(g, p["dec.r.w"], p["dec.r.b"], 1, 1));
        g = act(tp.conv1d_transpose(g, p["dec.t1.w"], p["dec.t1.b"], 2, 1));
        g = act(tp.conv1d_transpose(g, p["dec.t2.w"], p["dec.t2.b"], 2, 1));
        const char* out = v < cfg.H ? "dec.out_h.w" : "dec.out_o.w";
        const char* outb = v < cfg.H ? "dec.out_h.b" : "dec.out_o.b";
        return tp.conv1d(g, p[out], p[outb], 1, 0);  // (D_v, N)
    }

    // Continuous (pre-quantization) latents, (T_lat, V, d).
    Tensor encode_continuous(const SceneMotion& m) const {
        check_motion(m);
        int T = t_lat(m.N), V = cfg.n_entities();
        Tensor z = Tensor::zeros({T, V, cfg.d});
        for (int v = 0; v < V; ++v) {
            Tape tp;
            TapeBinding p(tp, const_cast<ParamStore&>(params), false);
            Var zc = encode_entity(tp, p, tp.constant(entity_features(m, v)), v);
            const Tensor& zt = tp.val(zc);  // (d, T)
            for (int t = 0; t < T; ++t)
                for (int i = 0; i < cfg.d; ++i) z.at(t, v, i) = zt.at(i, t);
        }
        return z;
    }

    int nearest_code(int level, const double* row) const {
        const Tensor& cb = codebooks[level];
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < cfg.codebook; ++k) {
            double s = 0.0;
            for (int i = 0; i < cfg.d; ++i) {
                double df = row[i] - cb.at(k, i);
                s += df * df;
            }
            if (s < best_d) {
                best_d = s;
                best = k;
            }
        }
        return best;
    }

    // Residual quantization of continuous latents; rows are (t, v) pairs.
    LatentSeq quantize(const Tensor& zc) const {
        LatentSeq out;
        out.z = Tensor::zeros(zc.shape);
        Tensor resid = zc;
        for (int l = 0; l < cfg.levels; ++l) {
            Tensor lvl = Tensor::zeros(zc.shape);
            int64_t rows = zc.numel() / cfg.d;
            for (int64_t r = 0; r < rows; ++r) {
                int k = nearest_code(l, &resid.data[r * cfg.d]);
                for (int i = 0; i < cfg.d; ++i) {
                    double c = codebooks[l].at(k, i);
                    lvl.data[r * cfg.d + i] = c;
                    resid.data[r * cfg.d + i] -= c;
                }
            }
            for (int64_t i = 0; i < lvl.numel(); ++i) out.z.data[i] += lvl.data[i];
            out.levels.push_back(std::move(lvl));
        }
        return out;
    }

    LatentSeq encode(const SceneMotion& m) const {
        if (!frozen) throw std::logic_error("codec: encode before freeze");
        if (!cfg.quantize) {
            LatentSeq out;
            out.z = encode_continuous(m);
            out.levels = {out.z};
            return out;
        }
        return quantize(encode_continuous(m));
    }

    // Differentiable decode of one entity from a (T_lat, d) latent Var.
    Var decode_entity_rows(Tape& tp, TapeBinding& p, Var z_td, int v) const {
        return decode_entity(tp, p, tp.transpose01(z_td), v);
    }

    // Plain decode: z (T_lat, V, d) -> SceneMotion with renormalized quaternions.
    SceneMotion decode(const Tensor& z) const {
        if (!frozen) throw std::logic_error("codec: decode before freeze");
        if (z.shape.size() != 3 || z.shape[1] != cfg.n_entities() || z.shape[2] != cfg.d)
            throw std::invalid_argument("codec: latent shape mismatch");
        int T = z.shape[0], N = T * cfg.stride, V = cfg.n_entities();
        SceneMotion m(SceneDims{cfg.H, cfg.J, cfg.O, cfg.anchors}, N);
        for (int v = 0; v < V; ++v) {
            Tape tp;
            TapeBinding p(tp, const_cast<ParamStore&>(params), false);
            Tensor zv = Tensor::zeros({cfg.d, T});
            for (int t = 0; t < T; ++t)
                for (int i = 0; i < cfg.d; ++i) zv.at(i, t) = z.at(t, v, i);
            Var yv = decode_entity(tp, p, tp.constant(zv), v);
            const Tensor& y = tp.val(yv);  // (D_v, N)
            int Dv = cfg.entity_dim(v), c0 = entity_col(v);
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < Dv; ++i)
                    m.frames.at(n, c0 + i) =
                        y.at(i, n) * feat_std.data[c0 + i] + feat_mean.data[c0 + i];
        }
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < cfg.O; ++o) {
                auto q = m.obj_quat(n, o);
                double nq = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
                if (nq < 1e-6)
                    m.set_obj_quat(n, o, {{1, 0, 0, 0}});
                else
                    m.set_obj_quat(n, o, {{q[0] / nq, q[1] / nq, q[2] / nq, q[3] / nq}});
            }
        m.frames.check_finite("codec.decode");
        return m;
    }

    void freeze() { frozen = true; }

    void check_motion(const SceneMotion& m) const {
        if (m.dims.H != cfg.H || m.dims.J != cfg.J || m.dims.O != cfg.O || m.dims.anchors != cfg.anchors)
            throw std::invalid_argument("codec: motion dims mismatch");
        if (m.N % cfg.stride != 0 || m.N / cfg.stride < 8)
            throw std::invalid_argument("codec: motion length incompatible with stride");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = 1;
        j["config"] = {{"H", cfg.H},         {"J", cfg.J},
                       {"O", cfg.O},         {"anchors", cfg.anchors},
                       {"stride", cfg.stride}, {"d", cfg.d},
                       {"levels", cfg.levels}, {"codebook", cfg.codebook},
                       {"quantize", cfg.quantize}, {"trunk", cfg.trunk}};
        j["params"] = params.to_json();
        j["codebooks"] = nlohmann::json::array();
        for (const auto& cb : codebooks) j["codebooks"].push_back(tensor_to_json(cb));
        j["feat_mean"] = tensor_to_json(feat_mean);
        j["feat_std"] = tensor_to_json(feat_std);
        j["latent_rms"] = latent_rms;
        j["frozen"] = frozen;
        return j;
    }

    static Codec from_json(const nlohmann::json& j) {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("codec checkpoint: unsupported format_version");
        Codec c;
        const auto& jc = j.at("config");
        c.cfg.H = jc.at("H");
        c.cfg.J = jc.at("J");
        c.cfg.O = jc.at("O");
        c.cfg.anchors = jc.at("anchors").get<std::vector<int>>();
        c.cfg.stride = jc.at("stride");
        c.cfg.d = jc.at("d");
        c.cfg.levels = jc.at("levels");
        c.cfg.codebook = jc.at("codebook");
        c.cfg.quantize = jc.at("quantize");
        c.cfg.trunk = jc.at("trunk");
        Rng dummy(0);
        c.init_params(dummy);
        c.params.load_json(j.at("params"));
        c.codebooks.clear();
        for (const auto& cb : j.at("codebooks")) c.codebooks.push_back(tensor_from_json(cb));
        c.feat_mean = tensor_from_json(j.at("feat_mean"));
        c.feat_std = tensor_from_json(j.at("feat_std"));
        c.latent_rms = j.at("latent_rms");
        c.frozen = j.at("frozen");
        return c;
    }

  private:
    static Tensor conv_init(int cout, int cin, int k, Rng& rng) {
        Tensor w = Tensor::zeros({cout, cin, k});
        double lim = std::sqrt(6.0 / (cin * k + cout * k));
        for (double& v : w.data) v = rng.uniform(-lim, lim);
        return w;
    }

    void init_params(Rng& rng) {
        int C = cfg.trunk, d = cfg.d;
        auto bias = [](int n) { return Tensor::zeros({n}); };
        params.create("enc.in_h.w", conv_init(C, cfg.human_dim(), 1, rng));
        params.create("enc.in_h.b", bias(C));
        params.create("enc.in_o.w", conv_init(C, cfg.object_dim(), 1, rng));
        params.create("enc.in_o.b", bias(C));
        params.create("enc.c1.w", conv_init(C, C, 4, rng));
        params.create("enc.c1.b", bias(C));
        params.create("enc.c2.w", conv_init(C, C, 4, rng));
        params.create("enc.c2.b", bias(C));
        params.create("enc.r.w", conv_init(C, C, 3, rng));
        params.create("enc.r.b", bias(C));
        params.create("enc.z.w", conv_init(d, C, 1, rng));
        params.create("enc.z.b", bias(d));
        params.create("dec.in.w", conv_init(C, d, 1, rng));
        params.create("dec.in.b", bias(C));
        params.create("dec.r.w", conv_init(C, C, 3, rng));
        params.create("dec.r.b", bias(C));
        // conv1d_transpose weights are (Cin, Cout, K).
        params.create("dec.t1.w", conv_init(C, C, 4, rng));
        params.create("dec.t1.b", bias(C));
        params.create("dec.t2.w", conv_init(C, C, 4, rng));
        params.create("dec.t2.b", bias(C));
        params.create("dec.out_h.w", conv_init(cfg.human_dim(), C, 1, rng));
        params.create("dec.out_h.b", bias(cfg.human_dim()));
        params.create("dec.out_o.w", conv_init(cfg.object_dim(), C, 1, rng));
        params.create("dec.out_o.b", bias(cfg.object_dim()));
    }
};

namespace detail {

// EMA codebook statistics for one quantization level.
struct CodebookEma {
    Tensor counts;     // (K,)
    Tensor sums;       // (K, d)
    std::vector<int> last_used;  // step of most recent batch assignment
};

}  // namespace detail

// Trains encoder/decoder with straight-through residual quantization and EMA
// codebooks, then freezes. Reconstruction loss is measured in normalized
// feature space; a held-out tail of the dataset gates the result.
inline Codec train_codec(const std::vector<SceneMotion>& dataset, const CodecConfig& cfg, Rng& rng) {
    if (dataset.empty()) throw ConfigError("train_codec: empty dataset");
    cfg.validate();
    for (const auto& m : dataset)
        if (m.dims.H != cfg.H || m.dims.J != cfg.J || m.dims.O != cfg.O)
            throw ConfigError("train_codec: dataset arity mismatch");

    Codec codec(cfg, rng);
    int D = cfg.full_dim();

    // Feature statistics over the training split.
    int n_val = std::max<int>(1, dataset.size() / 5);
    int n_train = std::max<int>(1, static_cast<int>(dataset.size()) - n_val);
    {
        std::vector<double> mean(D, 0.0), var(D, 0.0);
        int64_t rows = 0;
        for (int i = 0; i < n_train; ++i) rows += dataset[i].N;
        for (int i = 0; i < n_train; ++i)
            for (int n = 0; n < dataset[i].N; ++n)
                for (int c = 0; c < D; ++c) mean[c] += dataset[i].frames.at(n, c) / rows;
        for (int i = 0; i < n_train; ++i)
            for (int n = 0; n < dataset[i].N; ++n)
                for (int c = 0; c < D; ++c) {
                    double df = dataset[i].frames.at(n, c) - mean[c];
                    var[c] += df * df / rows;
                }
        for (int c = 0; c < D; ++c) {
            codec.feat_mean.data[c] = mean[c];
            codec.feat_std.data[c] = std::max(0.02, std::sqrt(var[c]));
        }
    }

    // Seed codebooks from initial encoder outputs so codes start on-manifold;
    // level l is seeded from the residuals left by levels below it.
    if (cfg.quantize) {
        std::vector<std::vector<double>> rows;
        for (int i = 0; i < std::min(n_train, 8); ++i) {
            Tensor z = codec.encode_continuous(dataset[i]);
            int64_t n_rows = z.numel() / cfg.d;
            for (int64_t r = 0; r < n_rows; ++r)
                rows.emplace_back(z.data.begin() + r * cfg.d, z.data.begin() + (r + 1) * cfg.d);
        }
        for (int l = 0; l < cfg.levels; ++l) {
            for (int k = 0; k < cfg.codebook; ++k) {
                const auto& src = rows[rng.integer(rows.size())];
                for (int i = 0; i < cfg.d; ++i)
                    codec.codebooks[l].at(k, i) = src[i] + 1e-3 * rng.normal();
            }
            for (auto& r : rows) {
                int k = codec.nearest_code(l, r.data());
                for (int i = 0; i < cfg.d; ++i) r[i] -= codec.codebooks[l].at(k, i);
            }
        }
    }

    std::vector<detail::CodebookEma> ema(cfg.levels);
    for (int l = 0; l < cfg.levels; ++l) {
        ema[l].counts = Tensor::full({cfg.codebook}, 1.0);
        ema[l].sums = codec.codebooks[l];
        ema[l].last_used.assign(cfg.codebook, 0);
    }

    AdamConfig opt;
    opt.lr = cfg.lr;
    int V = cfg.n_entities();

    for (int step = 0; step < cfg.steps; ++step) {
        Tape tp;
        TapeBinding p(tp, codec.params, true);
        GradMap grads;
        Var loss{};
        std::vector<Tensor> batch_rows;  // residual rows per level for EMA updates
        std::vector<std::vector<Tensor>> level_rows(cfg.levels);

        for (int b = 0; b < cfg.batch; ++b) {
            const SceneMotion& m = dataset[rng.integer(n_train)];
            for (int v = 0; v < V; ++v) {
                Tensor x = codec.entity_features(m, v);
                Var xin = tp.constant(x);
                Var zc = codec.encode_entity(tp, p, xin, v);  // (d, T)
                const Tensor& zcv = tp.val(zc);
                int T = zcv.shape[1];

                Var term{};
                if (cfg.quantize) {
                    // Residual quantization on values; straight-through on the tape.
                    const Tensor& zcv2 = zcv;
                    Tensor resid = zcv2;
                    Tensor zq = Tensor::zeros(zcv.shape);
                    for (int l = 0; l < cfg.levels; ++l) {
                        Tensor rows = Tensor::zeros({T, cfg.d});
                        for (int t = 0; t < T; ++t) {
                            std::vector<double> row(cfg.d);
                            for (int i = 0; i < cfg.d; ++i) row[i] = resid.at(i, t);
                            int k = codec.nearest_code(l, row.data());
                            for (int i = 0; i < cfg.d; ++i) {
                                double c = codec.codebooks[l].at(k, i);
                                zq.at(i, t) += c;
                                resid.at(i, t) -= c;
                                rows.at(t, i) = row[i];
                            }
                        }
                        level_rows[l].push_back(std::move(rows));
                    }
                    Tensor ste = zq;
                    for (int64_t i = 0; i < ste.numel(); ++i) ste.data[i] -= zcv.data[i];
                    Var z_st = tp.add(zc, tp.constant(ste));
                    Var y = codec.decode_entity(tp, p, z_st, v);
                    Var rec = tp.mean(tp.square(tp.sub(y, xin)));
                    Var commit = tp.mean(tp.square(tp.sub(zc, tp.constant(zq))));
                    term = tp.add(rec, tp.scale(commit, cfg.commit_beta));
                } else {
                    Var y = codec.decode_entity(tp, p, zc, v);
                    term = tp.mean(tp.square(tp.sub(y, xin)));
                }
                loss = loss.valid() ? tp.add(loss, term) : term;
            }
        }
        loss = tp.scale(loss, 1.0 / (cfg.batch * V));
        double lv = tp.val(loss).data[0];
        if (!std::isfinite(lv)) throw TrainingDivergence("train_codec: non-finite loss");
        tp.backward(loss);
        p.add_grads_to(grads);
        opt.lr = cfg.lr * (1.0 - 0.9 * step / std::max(1, cfg.steps - 1));
        codec.params.adam_step(grads, opt);

        // EMA codebook update from this batch's assignments.
        for (int l = 0; cfg.quantize && l < cfg.levels; ++l) {
            Tensor bc = Tensor::zeros({cfg.codebook});
            Tensor bs = Tensor::zeros({cfg.codebook, cfg.d});
            double assign_sq = 0.0;
            int64_t assign_n = 0;
            for (const Tensor& rows : level_rows[l])
                for (int t = 0; t < rows.shape[0]; ++t) {
                    int k = codec.nearest_code(l, &rows.data[t * cfg.d]);
                    bc.data[k] += 1.0;
                    ema[l].last_used[k] = step;
                    for (int i = 0; i < cfg.d; ++i) {
                        double df = rows.at(t, i) - codec.codebooks[l].at(k, i);
                        assign_sq += df * df;
                        bs.at(k, i) += rows.at(t, i);
                    }
                    ++assign_n;
                }
            for (int k = 0; k < cfg.codebook; ++k) {
                ema[l].counts.data[k] = cfg.ema * ema[l].counts.data[k] + (1 - cfg.ema) * bc.data[k];
                for (int i = 0; i < cfg.d; ++i)
                    ema[l].sums.at(k, i) = cfg.ema * ema[l].sums.at(k, i) + (1 - cfg.ema) * bs.at(k, i);
                double denom = std::max(ema[l].counts.data[k], 1e-5);
                for (int i = 0; i < cfg.d; ++i)
                    codec.codebooks[l].at(k, i) = ema[l].sums.at(k, i) / denom;
            }
            // Revive codes unused for a full revival period near current batch
            // rows, jittered at the assignment-error scale so spare codes
            // cover the gaps between occupied rows instead of duplicating them.
            if (step % 50 == 49 && !level_rows[l].empty()) {
                double sigma = std::sqrt(assign_sq / std::max<int64_t>(1, assign_n * cfg.d));
                for (int k = 0; k < cfg.codebook; ++k)
                    if (step - ema[l].last_used[k] >= 50) {
                        const Tensor& rows = level_rows[l][rng.integer(level_rows[l].size())];
                        int t = rng.integer(rows.shape[0]);
                        for (int i = 0; i < cfg.d; ++i) {
                            double cv = rows.at(t, i) + sigma * rng.normal();
                            codec.codebooks[l].at(k, i) = cv;
                            ema[l].sums.at(k, i) = cv;
                        }
                        ema[l].counts.data[k] = 1.0;
                    }
            }
        }
    }

    codec.freeze();

    // Held-out gate in normalized feature space plus latent scale estimate.
    double val = 0.0;
    int64_t val_n = 0;
    double lat_sq = 0.0;
    int64_t lat_n = 0;
    for (size_t i = 0; i < dataset.size(); ++i) {
        LatentSeq z = codec.encode(dataset[i]);
        for (double zv : z.z.data) {
            lat_sq += zv * zv;
            ++lat_n;
        }
        if (static_cast<int>(i) < n_train) continue;
        SceneMotion rec = codec.decode(z.z);
        for (int n = 0; n < dataset[i].N; ++n)
            for (int c = 0; c < D; ++c) {
                double df = (rec.frames.at(n, c) - dataset[i].frames.at(n, c)) / codec.feat_std.data[c];
                val += df * df;
                ++val_n;
            }
    }
    codec.latent_rms = std::max(1e-6, std::sqrt(lat_sq / lat_n));
    if (val / std::max<int64_t>(1, val_n) > cfg.recon_threshold)
        throw TrainingDivergence("train_codec: held-out reconstruction above threshold");
    return codec;
}

// Low-rank block-Toeplitz approximation of the decoder-transpose Jacobian.
// Factors are indexed by entity type and temporal offset; application is
// linear and shares factors across latent steps.
struct JacobianSurrogate {
    int rank = 8;
    int window = 2;  // offsets -window..window
    int stride = 4;
    std::vector<int> type_dim;                     // feature dim per entity type
    std::vector<std::vector<Tensor>> U;            // [type][offset] (d, r)
    std::vector<std::vector<Tensor>> W;            // [type][offset] (r, stride*D_type)
    int d = 16;

    int n_offsets() const { return 2 * window + 1; }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = 1;
        j["rank"] = rank;
        j["window"] = window;
        j["stride"] = stride;
        j["d"] = d;
        j["type_dim"] = type_dim;
        j["U"] = nlohmann::json::array();
        j["W"] = nlohmann::json::array();
        for (size_t t = 0; t < U.size(); ++t) {
            nlohmann::json ju = nlohmann::json::array(), jw = nlohmann::json::array();
            for (int o = 0; o < n_offsets(); ++o) {
                ju.push_back(tensor_to_json(U[t][o]));
                jw.push_back(tensor_to_json(W[t][o]));
            }
            j["U"].push_back(ju);
            j["W"].push_back(jw);
        }
        return j;
    }

    static JacobianSurrogate from_json(const nlohmann::json& j) {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("surrogate checkpoint: unsupported format_version");
        JacobianSurrogate s;
        s.rank = j.at("rank");
        s.window = j.at("window");
        s.stride = j.at("stride");
        s.d = j.at("d");
        s.type_dim = j.at("type_dim").get<std::vector<int>>();
        for (size_t t = 0; t < j.at("U").size(); ++t) {
            std::vector<Tensor> u, w;
            for (int o = 0; o < s.n_offsets(); ++o) {
                u.push_back(tensor_from_json(j.at("U")[t][o]));
                w.push_back(tensor_from_json(j.at("W")[t][o]));
            }
            s.U.push_back(std::move(u));
            s.W.push_back(std::move(w));
        }
        return s;
    }
};

// B g: motion-space gradient (N, D_full) -> latent direction (T_lat, V, d).
// The first n_first entities are type 0, the rest type 1; feature columns are
// laid out entity by entity.
inline Tensor precondition_on(const JacobianSurrogate& s, int n_first, int V, const Tensor& g) {
    int D_full = 0;
    for (int v = 0; v < V; ++v) D_full += s.type_dim[v < n_first ? 0 : 1];
    if (g.shape.size() != 2 || g.shape[1] != D_full)
        throw std::invalid_argument("precondition: gradient shape mismatch");
    g.check_finite("precondition input");
    int N = g.shape[0], T = N / s.stride;
    Tensor out = Tensor::zeros({T, V, s.d});
    int col = 0;
    for (int v = 0; v < V; ++v) {
        int type = v < n_first ? 0 : 1;
        int Dv = s.type_dim[type], c0 = col, B = s.stride * Dv;
        col += Dv;
        std::vector<double> blk(B), proj(s.rank);
        for (int t = 0; t < T; ++t)
            for (int o = -s.window; o <= s.window; ++o) {
                int tb = t + o;
                if (tb < 0 || tb >= T) continue;
                for (int k = 0; k < s.stride; ++k)
                    for (int i = 0; i < Dv; ++i) blk[k * Dv + i] = g.at(tb * s.stride + k, c0 + i);
                const Tensor& Wm = s.W[type][o + s.window];
                const Tensor& Um = s.U[type][o + s.window];
                for (int r = 0; r < s.rank; ++r) {
                    double acc = 0.0;
                    const double* wr = &Wm.data[static_cast<int64_t>(r) * B];
                    for (int c = 0; c < B; ++c) acc += wr[c] * blk[c];
                    proj[r] = acc;
                }
                for (int i = 0; i < s.d; ++i) {
                    double acc = 0.0;
                    for (int r = 0; r < s.rank; ++r) acc += Um.at(i, r) * proj[r];
                    out.at(t, v, i) += acc;
                }
            }
    }
    return out;
}

inline Tensor precondition(const JacobianSurrogate& s, const Codec& codec, const Tensor& g) {
    return precondition_on(s, codec.cfg.H, codec.cfg.n_entities(), g);
}

// Decoder view used by surrogate fitting: one differentiable per-type decode
// plus the dims needed to address motion-space gradients.
struct SurrogateProblem {
    int d = 16;
    int stride = 4;
    int window = 2;
    double probe_scale = 0.5;
    std::vector<int> type_dim;
    // z (d, T) for an entity of the given type -> features (D_type, T*stride).
    std::function<Var(Tape&, Var, int)> decode;
    // Linearization points: per-entity latents (T, d) grouped by type. Empty
    // pools fall back to scaled white noise.
    std::vector<std::vector<Tensor>> z_pool;
};

inline SurrogateProblem surrogate_problem(const Codec& codec,
                                          const std::vector<Tensor>& latents = {}) {
    if (!codec.frozen) throw std::logic_error("fit_surrogate: codec not frozen");
    SurrogateProblem pr;
    pr.d = codec.cfg.d;
    pr.stride = codec.cfg.stride;
    pr.window = 2;  // decoder receptive field spans one latent step each way
    pr.probe_scale = 0.5 * codec.latent_rms;
    pr.type_dim = {codec.cfg.human_dim(), codec.cfg.object_dim()};
    pr.decode = [&codec](Tape& tp, Var z, int type) {
        TapeBinding p(tp, const_cast<ParamStore&>(codec.params), false);
        return codec.decode_entity(tp, p, z, type == 0 ? 0 : codec.cfg.H);
    };
    pr.z_pool.resize(2);
    for (const Tensor& z : latents) {
        if (z.shape.size() != 3 || z.shape[2] != codec.cfg.d) continue;
        for (int v = 0; v < z.shape[1]; ++v) {
            Tensor zv = Tensor::zeros({z.shape[0], codec.cfg.d});
            for (int t = 0; t < z.shape[0]; ++t)
                for (int i = 0; i < codec.cfg.d; ++i) zv.at(t, i) = z.at(t, v, i);
            pr.z_pool[v < codec.cfg.H ? 0 : 1].push_back(std::move(zv));
        }
    }
    return pr;
}

// Extracts the interior Toeplitz kernel of the decoder-transpose Jacobian
// with interleaved unit probes: the receptive field is short, so one backward
// pass reads off two feature columns at once, each at many well-separated
// anchor blocks. Each probe linearizes at a fresh latent sample; the per-column
// kernel is the anchor average, and offset blocks are then truncated to rank r
// (exact when the decoder is linear and r covers the true rank).
inline JacobianSurrogate fit_surrogate_on(const SurrogateProblem& pr, int probes, int rank,
                                          uint64_t seed) {
    if (rank < 1) throw ConfigError("fit_surrogate: rank must be >= 1");
    if (rank > pr.d) throw ConfigError("fit_surrogate: rank exceeds latent dim");
    JacobianSurrogate s;
    s.rank = rank;
    s.window = pr.window;
    s.stride = pr.stride;
    s.d = pr.d;
    s.type_dim = pr.type_dim;

    Rng rng(seed);
    const int T = std::max(96, 6 * pr.window + 4);
    int needed = 0;
    for (int Dv : pr.type_dim) needed += (pr.stride * Dv + 1) / 2;
    if (probes < needed) throw ConfigError("fit_surrogate: probe budget below required sweep");

    // Interior anchor blocks spaced past the receptive field so responses
    // cannot mix, one step clear of the latent-resolution convolution edges.
    std::vector<int> anchors;
    for (int a = pr.window + 1; a <= T - 2 - pr.window; a += 2 * pr.window + 1)
        anchors.push_back(a);
    for (size_t type = 0; type < pr.type_dim.size(); ++type) {
        int Dv = pr.type_dim[type], B = pr.stride * Dv;
        const std::vector<Tensor>* pool =
            pr.z_pool.size() > type && !pr.z_pool[type].empty() ? &pr.z_pool[type] : nullptr;
        // kernel[o] collects columns of M_o = d x (stride*Dv).
        std::vector<Tensor> kernel(2 * pr.window + 1, Tensor::zeros({pr.d, B}));
        for (int c0 = 0; c0 < B; c0 += 2) {
            std::vector<int> cols = {c0};
            if (c0 + 1 < B) cols.push_back(c0 + 1);
            Tensor z = Tensor::zeros({pr.d, T});
            if (pool) {
                const Tensor& src = (*pool)[rng.integer(pool->size())];
                for (int t = 0; t < T; ++t) {
                    int ts = t % src.shape[0];
                    for (int c = 0; c < pr.d; ++c)
                        z.at(c, t) = src.at(ts, c) + 0.1 * pr.probe_scale * rng.normal();
                }
            } else {
                for (double& x : z.data) x = pr.probe_scale * rng.normal();
            }
            Tape tp;
            Var zv = tp.leaf(z, true);
            Var y = pr.decode(tp, zv, static_cast<int>(type));  // (Dv, N)
            Tensor u = Tensor::zeros(tp.val(y).shape);
            // Column cols[j] takes every other anchor so neighbouring anchors
            // always carry different columns.
            for (size_t a = 0; a < anchors.size(); ++a) {
                int c = cols[cols.size() > 1 ? a % 2 : 0];
                u.at(c % Dv, anchors[a] * pr.stride + c / Dv) = 1.0;
            }
            Var sc = tp.dot_prod(y, tp.constant(u));
            tp.backward(sc);
            const Tensor gz = tp.grad(zv);  // (d, T)
            // The response read at latent step a - o is the kernel for offset
            // o: impulses at block t+o land on out[t].
            for (size_t j = 0; j < cols.size(); ++j) {
                int c = cols[j], cnt = 0;
                for (size_t a = j; a < anchors.size(); a += cols.size()) ++cnt;
                for (size_t a = (cols.size() > 1 ? j : 0); a < anchors.size(); a += cols.size())
                    for (int o = -pr.window; o <= pr.window; ++o)
                        for (int cc = 0; cc < pr.d; ++cc)
                            kernel[o + pr.window].at(cc, c) +=
                                gz.at(cc, anchors[a] - o) / cnt;
            }
        }

        // Rank truncation per offset via the d x d Gram eigendecomposition.
        std::vector<Tensor> Us, Ws;
        for (int o = 0; o < 2 * pr.window + 1; ++o) {
            const Tensor& M = kernel[o];
            Tensor G = Tensor::zeros({pr.d, pr.d});
            for (int a = 0; a < pr.d; ++a)
                for (int b = 0; b < pr.d; ++b) {
                    double acc = 0.0;
                    for (int c = 0; c < B; ++c) acc += M.at(a, c) * M.at(b, c);
                    G.at(a, b) = acc;
                }
            Tensor evals, V;
            jacobi_eigh(G, evals, V);  // ascending eigenvalues, columns are vectors
            Tensor Um = Tensor::zeros({pr.d, rank}), Wm = Tensor::zeros({rank, B});
            for (int r = 0; r < rank; ++r) {
                int src = pr.d - 1 - r;
                for (int a = 0; a < pr.d; ++a) Um.at(a, r) = V.at(a, src);
                for (int c = 0; c < B; ++c) {
                    double acc = 0.0;
                    for (int a = 0; a < pr.d; ++a) acc += V.at(a, src) * M.at(a, c);
                    Wm.at(r, c) = acc;
                }
            }
            Us.push_back(std::move(Um));
            Ws.push_back(std::move(Wm));
        }
        s.U.push_back(std::move(Us));
        s.W.push_back(std::move(Ws));
    }
    return s;
}

inline JacobianSurrogate fit_surrogate(const Codec& codec, int probes, int rank, uint64_t seed,
                                       const std::vector<Tensor>& latents = {}) {
    return fit_surrogate_on(surrogate_problem(codec, latents), probes, rank, seed);
}

// Exact J^T g via reverse-mode differentiation through a decoder view; the
// oracle the surrogate is measured against. Entity v has type 0 for the
// first n_first entities and 1 after.
inline Tensor jacobian_transpose_apply_on(const SurrogateProblem& pr, int n_first, int V,
                                          const Tensor& z, const Tensor& g) {
    int T = z.shape[0];
    Tensor out = Tensor::zeros({T, V, pr.d});
    int col = 0;
    for (int v = 0; v < V; ++v) {
        int type = v < n_first ? 0 : 1;
        int Dv = pr.type_dim[type];
        Tape tp;
        Tensor zv = Tensor::zeros({pr.d, T});
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < pr.d; ++i) zv.at(i, t) = z.at(t, v, i);
        Var zl = tp.leaf(zv, true);
        Var y = pr.decode(tp, zl, type);
        Tensor u = Tensor::zeros(tp.val(y).shape);
        for (int n = 0; n < u.shape[1]; ++n)
            for (int i = 0; i < Dv; ++i) u.at(i, n) = g.at(n, col + i);
        Var sc = tp.dot_prod(y, tp.constant(u));
        tp.backward(sc);
        const Tensor& gz = tp.grad(zl);
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < pr.d; ++i) out.at(t, v, i) = gz.at(i, t);
        col += Dv;
    }
    return out;
}

inline Tensor decoder_jacobian_transpose_apply(const Codec& codec, const Tensor& z,
                                               const Tensor& g) {
    return jacobian_transpose_apply_on(surrogate_problem(codec), codec.cfg.H,
                                       codec.cfg.n_entities(), z, g);
}

}  // namespace storyflow

#pragma once

// The two learned modules.
//
// GCU: patch encoder -> affine projection into the text embedding space ->
// pre-norm transformer over [visual prefix, text].
// PG: small conv encoder over the image, an MLP that turns [SEG] hidden
// states into prompts, and a prompt-conditioned per-pixel mask decoder.
//
// Everything here is graph-level: callers own the Graph and decide whether
// it records a tape. Value-level wrappers live in inference.hpp.

#include "medseg/autograd.hpp"
#include "medseg/errors.hpp"
#include "medseg/grid.hpp"
#include "medseg/synth.hpp"
#include "medseg/tokenizer.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace medseg {

struct GcuConfig {
    int patch_size = 8;
    int d_vision = 64;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq = 256;
    int vocab_size = 0;
    int image_size = 64;
    bool identity_projection = false; // debug: W = I, b = 0 (needs d_vision == d_model)

    int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }

    void validate() const {
        auto need = [](bool ok, const std::string& what) {
            if (!ok) throw InvalidArgument("gcu config: " + what);
        };
        need(patch_size > 0 && d_vision > 0 && d_model > 0 && n_layers > 0 && n_heads > 0 && d_ff > 0, "sizes must be positive");
        need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        need(d_vision % 4 == 0, "d_vision must be divisible by 4");
        need(image_size > 0 && image_size % patch_size == 0, "image_size must be divisible by patch_size");
        need(vocab_size > token::num_special, "vocab_size must cover the special tokens");
        need(max_seq > num_patches(), "max_seq must exceed the visual prefix");
        need(!identity_projection || d_vision == d_model, "identity projection needs d_vision == d_model");
    }
};

struct PgConfig {
    int enc_channels = 16;
    int d_feat = 32;
    int skip_channels = 16;
    int prompt_hidden = 128;
    int refine_channels = 8;

    int d_prompt() const { return d_feat + skip_channels; }

    void validate() const {
        if (enc_channels <= 0 || d_feat <= 0 || skip_channels <= 0 || prompt_hidden <= 0 || refine_channels <= 0) {
            throw InvalidArgument("pg config: sizes must be positive");
        }
    }
};

struct ModelConfig {
    GcuConfig gcu;
    PgConfig pg;
    std::uint64_t seed = 0;

    void validate() const {
        gcu.validate();
        pg.validate();
    }

    static ModelConfig defaults(int vocab_size) {
        ModelConfig c;
        c.gcu.vocab_size = vocab_size;
        return c;
    }

    /// Small enough for exhaustive finite-difference checks in double.
    static ModelConfig tiny(int vocab_size) {
        ModelConfig c;
        c.gcu = GcuConfig{8, 16, 16, 1, 2, 32, 64, vocab_size, 16, false};
        c.pg = PgConfig{4, 8, 4, 16, 4};
        return c;
    }
};

inline void to_json(nlohmann::json& j, const GcuConfig& c) {
    j = {{"patch_size", c.patch_size}, {"d_vision", c.d_vision}, {"d_model", c.d_model},
         {"n_layers", c.n_layers},     {"n_heads", c.n_heads},   {"d_ff", c.d_ff},
         {"max_seq", c.max_seq},       {"vocab_size", c.vocab_size}, {"image_size", c.image_size},
         {"identity_projection", c.identity_projection}};
}
inline void from_json(const nlohmann::json& j, GcuConfig& c) {
    c.patch_size = j.at("patch_size");
    c.d_vision = j.at("d_vision");
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_ff = j.at("d_ff");
    c.max_seq = j.at("max_seq");
    c.vocab_size = j.at("vocab_size");
    c.image_size = j.at("image_size");
    c.identity_projection = j.value("identity_projection", false);
}
inline void to_json(nlohmann::json& j, const PgConfig& c) {
    j = {{"enc_channels", c.enc_channels}, {"d_feat", c.d_feat}, {"skip_channels", c.skip_channels},
         {"prompt_hidden", c.prompt_hidden}, {"refine_channels", c.refine_channels}};
}
inline void from_json(const nlohmann::json& j, PgConfig& c) {
    c.enc_channels = j.at("enc_channels");
    c.d_feat = j.at("d_feat");
    c.skip_channels = j.at("skip_channels");
    c.prompt_hidden = j.at("prompt_hidden");
    c.refine_channels = j.at("refine_channels");
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) { j = {{"gcu", c.gcu}, {"pg", c.pg}, {"seed", c.seed}}; }
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.gcu = j.at("gcu").get<GcuConfig>();
    c.pg = j.at("pg").get<PgConfig>();
    c.seed = j.value("seed", std::uint64_t{0});
}

/// Fixed 2-D sinusoidal code for a (rows x cols) patch grid: the first half
/// of the channels encodes the patch row, the second half the column.
template <class T>
ag::Matrix<T> patch_position_code(int grid_rows, int grid_cols, int dim) {
    ag::Matrix<T> pe(grid_rows * grid_cols, dim);
    const int quarter = dim / 4;
    for (int r = 0; r < grid_rows; ++r) {
        for (int c = 0; c < grid_cols; ++c) {
            const Eigen::Index row = static_cast<Eigen::Index>(r) * grid_cols + c;
            for (int k = 0; k < quarter; ++k) {
                const double f = std::pow(10000.0, -static_cast<double>(k) / quarter);
                pe(row, 2 * k) = static_cast<T>(std::sin(r * f));
                pe(row, 2 * k + 1) = static_cast<T>(std::cos(r * f));
                pe(row, 2 * quarter + 2 * k) = static_cast<T>(std::sin(c * f));
                pe(row, 2 * quarter + 2 * k + 1) = static_cast<T>(std::cos(c * f));
            }
        }
    }
    return pe;
}

/// Grounding-encoder outputs for one image.
struct GroundFeatures {
    ag::Var coarse; // (h/4 * w/4) x d_feat
    ag::Var pixels; // (h * w) x d_prompt: upsampled coarse features next to full-res skip features
    ag::Var image;  // (h * w) x 1
    int height = 0;
    int width = 0;
};

template <class T>
class Model {
  public:
    using Mat = ag::Matrix<T>;
    using Graph = ag::Graph<T>;
    using Var = ag::Var;

    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    ag::ParameterSet<T>& params() { return params_; }
    const ag::ParameterSet<T>& params() const { return params_; }

    /// Parameter group, e.g. "llm.block0" or "pg.prompt".
    static std::string group_of(const std::string& name) {
        const auto a = name.find('.');
        const auto b = name.find('.', a + 1);
        return name.substr(0, b);
    }

    // ---- GCU -------------------------------------------------------------

    /// Flattened non-overlapping patches through the learned linear map,
    /// before the positional code.
    Var patch_embed(Graph& g, const ImageGrid& image) const {
        const int p = cfg_.gcu.patch_size;
        if (image.height % p != 0 || image.width % p != 0) {
            throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                             " is not divisible by patch size " + std::to_string(p));
        }
        const int gr = image.height / p;
        const int gc = image.width / p;
        Mat patches(gr * gc, p * p);
        for (int r = 0; r < gr; ++r) {
            for (int c = 0; c < gc; ++c) {
                for (int i = 0; i < p; ++i) {
                    for (int j = 0; j < p; ++j) patches(r * gc + c, i * p + j) = static_cast<T>(image(r * p + i, c * p + j));
                }
            }
        }
        return g.affine(g.input(std::move(patches)), g.param(ix_.patch_w), g.param(ix_.patch_b));
    }

    Var encode_image(Graph& g, const ImageGrid& image) const {
        Var e = patch_embed(g, image);
        const int p = cfg_.gcu.patch_size;
        return g.add(e, g.input(patch_position_code<T>(image.height / p, image.width / p, cfg_.gcu.d_vision)));
    }

    Var project_visual(Graph& g, Var s_v) const {
        if (g.cols(s_v) != cfg_.gcu.d_vision) throw ShapeError("visual tokens must have d_vision columns");
        return g.affine(s_v, g.param(ix_.proj_w), g.param(ix_.proj_b));
    }

    /// Last-layer states for [alpha_v, text]; the visual rows form a
    /// bidirectional prefix, text rows are causal.
    Var llm_states(Graph& g, Var alpha_v, std::span<const TokenId> ids) const {
        const auto& c = cfg_.gcu;
        if (g.cols(alpha_v) != c.d_model) throw ShapeError("projected tokens must have d_model columns");
        const Eigen::Index prefix = g.rows(alpha_v);
        const Eigen::Index seq = prefix + static_cast<Eigen::Index>(ids.size());
        if (seq > c.max_seq) {
            throw SequenceTooLong("sequence of " + std::to_string(seq) + " exceeds max_seq " + std::to_string(c.max_seq));
        }
        std::vector<Eigen::Index> rows;
        rows.reserve(ids.size());
        for (TokenId id : ids) {
            if (id < 0 || id >= c.vocab_size) throw IdOutOfRange("token id " + std::to_string(id));
            rows.push_back(id);
        }
        Var x = alpha_v;
        if (!rows.empty()) {
            const Var parts[] = {alpha_v, g.gather_rows(g.param(ix_.tok_emb), std::move(rows))};
            x = g.concat_rows(parts);
        }
        x = g.add(x, g.slice_rows(g.param(ix_.pos_emb), 0, seq));
        for (const auto& L : ix_.layers) {
            Var h = g.layer_norm(x, g.param(L.ln1_g), g.param(L.ln1_b));
            Var q = g.affine(h, g.param(L.q_w), g.param(L.q_b));
            Var k = g.affine(h, g.param(L.k_w), g.param(L.k_b));
            Var v = g.affine(h, g.param(L.v_w), g.param(L.v_b));
            Var a = g.attention(q, k, v, c.n_heads, prefix);
            x = g.add(x, g.affine(a, g.param(L.o_w), g.param(L.o_b)));
            h = g.layer_norm(x, g.param(L.ln2_g), g.param(L.ln2_b));
            h = g.gelu(g.affine(h, g.param(L.ff1_w), g.param(L.ff1_b)));
            x = g.add(x, g.affine(h, g.param(L.ff2_w), g.param(L.ff2_b)));
        }
        return g.layer_norm(x, g.param(ix_.lnf_g), g.param(ix_.lnf_b));
    }

    Var lm_logits(Graph& g, Var states) const { return g.affine(states, g.param(ix_.head_w), g.param(ix_.head_b)); }

    // ---- PG --------------------------------------------------------------

    GroundFeatures ground_encode(Graph& g, const ImageGrid& image) const {
        const int h = image.height;
        const int w = image.width;
        if (h % 4 != 0 || w % 4 != 0) throw ShapeError("grounding encoder needs image sides divisible by 4");
        Mat pix(static_cast<Eigen::Index>(h) * w, 1);
        for (std::size_t i = 0; i < image.values.size(); ++i) pix(static_cast<Eigen::Index>(i), 0) = static_cast<T>(image.values[i]);
        GroundFeatures f;
        f.height = h;
        f.width = w;
        f.image = g.input(std::move(pix));
        Var e1 = g.gelu(g.affine(g.im2col3x3(f.image, h, w, 2), g.param(ix_.enc1_w), g.param(ix_.enc1_b)));
        f.coarse = g.affine(g.im2col3x3(e1, h / 2, w / 2, 2), g.param(ix_.enc2_w), g.param(ix_.enc2_b));
        Var s1 = g.gelu(g.affine(g.im2col3x3(f.image, h, w, 1), g.param(ix_.skip1_w), g.param(ix_.skip1_b)));
        Var s2 = g.gelu(g.affine(g.im2col3x3(s1, h, w, 1), g.param(ix_.skip2_w), g.param(ix_.skip2_b)));
        f.pixels = g.concat_cols(g.upsample_bilinear(f.coarse, h / 4, w / 4, 4), s2);
        return f;
    }

    /// n x d_model states -> n x d_prompt prompts.
    Var project_prompt(Graph& g, Var states) const {
        if (g.cols(states) != cfg_.gcu.d_model) throw ShapeError("prompt projection expects d_model columns");
        Var h = g.gelu(g.affine(states, g.param(ix_.prompt1_w), g.param(ix_.prompt1_b)));
        return g.affine(h, g.param(ix_.prompt2_w), g.param(ix_.prompt2_b));
    }

    /// One 1 x d_prompt prompt -> (h*w) x 1 logit column.
    Var decode_mask(Graph& g, const GroundFeatures& f, Var prompt) const {
        if (g.rows(prompt) != 1 || g.cols(prompt) != cfg_.pg.d_prompt()) throw ShapeError("decode_mask expects a 1 x d_prompt prompt");
        Var score = g.matmul_nt(f.pixels, prompt);
        Var r = g.concat_cols(score, f.image);
        r = g.gelu(g.affine(g.im2col3x3(r, f.height, f.width, 1), g.param(ix_.refine1_w), g.param(ix_.refine1_b)));
        r = g.affine(g.im2col3x3(r, f.height, f.width, 1), g.param(ix_.refine2_w), g.param(ix_.refine2_b));
        return g.add(score, r);
    }

  private:
    struct Block {
        std::size_t ln1_g, ln1_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
    };
    struct Index {
        std::size_t patch_w, patch_b, proj_w, proj_b, tok_emb, pos_emb, lnf_g, lnf_b, head_w, head_b;
        std::vector<Block> layers;
        std::size_t enc1_w, enc1_b, enc2_w, enc2_b, skip1_w, skip1_b, skip2_w, skip2_b;
        std::size_t prompt1_w, prompt1_b, prompt2_w, prompt2_b, refine1_w, refine1_b, refine2_w, refine2_b;
    };

    void build() {
        const auto& c = cfg_.gcu;
        const auto& p = cfg_.pg;
        std::mt19937_64 rng = synth::sample_rng(cfg_.seed, 0x6d6f64656cULL);
        auto normal = [&](int r, int cc, double std) {
            Mat m(r, cc);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * synth::gaussian(rng));
            return m;
        };
        auto zeros = [](int r, int cc) { return Mat::Zero(r, cc).eval(); };
        auto ones = [](int r, int cc) { return Mat::Ones(r, cc).eval(); };
        auto fan_in = [&](int in, int out) { return normal(in, out, 1.0 / std::sqrt(static_cast<double>(in))); };
        auto he = [&](int in, int out) { return normal(in, out, std::sqrt(2.0 / in)); };

        const int pp = c.patch_size * c.patch_size;
        ix_.patch_w = params_.add("gcu.vision.patch_w", fan_in(pp, c.d_vision));
        ix_.patch_b = params_.add("gcu.vision.patch_b", zeros(1, c.d_vision));
        ix_.proj_w = params_.add("gcu.proj.w", c.identity_projection ? Mat(Mat::Identity(c.d_vision, c.d_model))
                                                                     : fan_in(c.d_vision, c.d_model));
        ix_.proj_b = params_.add("gcu.proj.b", zeros(1, c.d_model));

        const double s = 0.02;
        const double s_out = s / std::sqrt(2.0 * c.n_layers);
        ix_.tok_emb = params_.add("llm.embed.tokens", normal(c.vocab_size, c.d_model, s));
        ix_.pos_emb = params_.add("llm.embed.positions", normal(c.max_seq, c.d_model, s));
        for (int l = 0; l < c.n_layers; ++l) {
            const std::string pre = "llm.block" + std::to_string(l) + ".";
            Block b{};
            b.ln1_g = params_.add(pre + "ln1_g", ones(1, c.d_model));
            b.ln1_b = params_.add(pre + "ln1_b", zeros(1, c.d_model));
            b.q_w = params_.add(pre + "q_w", normal(c.d_model, c.d_model, s));
            b.q_b = params_.add(pre + "q_b", zeros(1, c.d_model));
            b.k_w = params_.add(pre + "k_w", normal(c.d_model, c.d_model, s));
            b.k_b = params_.add(pre + "k_b", zeros(1, c.d_model));
            b.v_w = params_.add(pre + "v_w", normal(c.d_model, c.d_model, s));
            b.v_b = params_.add(pre + "v_b", zeros(1, c.d_model));
            b.o_w = params_.add(pre + "o_w", normal(c.d_model, c.d_model, s_out));
            b.o_b = params_.add(pre + "o_b", zeros(1, c.d_model));
            b.ln2_g = params_.add(pre + "ln2_g", ones(1, c.d_model));
            b.ln2_b = params_.add(pre + "ln2_b", zeros(1, c.d_model));
            b.ff1_w = params_.add(pre + "ff1_w", normal(c.d_model, c.d_ff, s));
            b.ff1_b = params_.add(pre + "ff1_b", zeros(1, c.d_ff));
            b.ff2_w = params_.add(pre + "ff2_w", normal(c.d_ff, c.d_model, s_out));
            b.ff2_b = params_.add(pre + "ff2_b", zeros(1, c.d_model));
            ix_.layers.push_back(b);
        }
        ix_.lnf_g = params_.add("llm.final.ln_g", ones(1, c.d_model));
        ix_.lnf_b = params_.add("llm.final.ln_b", zeros(1, c.d_model));
        ix_.head_w = params_.add("llm.head.w", normal(c.d_model, c.vocab_size, s));
        ix_.head_b = params_.add("llm.head.b", zeros(1, c.vocab_size));

        ix_.enc1_w = params_.add("pg.encoder.conv1_w", he(9, p.enc_channels));
        ix_.enc1_b = params_.add("pg.encoder.conv1_b", zeros(1, p.enc_channels));
        ix_.enc2_w = params_.add("pg.encoder.conv2_w", he(9 * p.enc_channels, p.d_feat));
        ix_.enc2_b = params_.add("pg.encoder.conv2_b", zeros(1, p.d_feat));
        ix_.skip1_w = params_.add("pg.encoder.skip1_w", he(9, p.skip_channels));
        ix_.skip1_b = params_.add("pg.encoder.skip1_b", zeros(1, p.skip_channels));
        ix_.skip2_w = params_.add("pg.encoder.skip2_w", he(9 * p.skip_channels, p.skip_channels));
        ix_.skip2_b = params_.add("pg.encoder.skip2_b", zeros(1, p.skip_channels));
        ix_.prompt1_w = params_.add("pg.prompt.fc1_w", fan_in(c.d_model, p.prompt_hidden));
        ix_.prompt1_b = params_.add("pg.prompt.fc1_b", zeros(1, p.prompt_hidden));
        ix_.prompt2_w = params_.add("pg.prompt.fc2_w", fan_in(p.prompt_hidden, p.d_prompt()));
        ix_.prompt2_b = params_.add("pg.prompt.fc2_b", zeros(1, p.d_prompt()));
        ix_.refine1_w = params_.add("pg.decoder.refine1_w", he(18, p.refine_channels));
        ix_.refine1_b = params_.add("pg.decoder.refine1_b", zeros(1, p.refine_channels));
        ix_.refine2_w = params_.add("pg.decoder.refine2_w", fan_in(9 * p.refine_channels, 1));
        ix_.refine2_b = params_.add("pg.decoder.refine2_b", zeros(1, 1));
    }

    ModelConfig cfg_;
    ag::ParameterSet<T> params_;
    Index ix_{};
};

} // namespace medseg

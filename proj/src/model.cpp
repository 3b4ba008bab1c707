#include "tract/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace tract {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) {
    const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
    return 0.5 * u * (1.0 + t);
}

double gelu_grad(double u) {
    const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

// out = in * w + bias for a single row. Accumulation runs over k in order,
// so a row's value never depends on how many rows are processed together.
void affine_row(const double* __restrict in, const Matrix& w, const Matrix& bias,
                double* __restrict out) {
    const Eigen::Index n = w.cols();
    const double* b = bias.data();
    for (Eigen::Index j = 0; j < n; ++j) {
        out[j] = b[j];
    }
    for (Eigen::Index k = 0; k < w.rows(); ++k) {
        const double a = in[k];
        const double* wr = w.data() + k * n;
        for (Eigen::Index j = 0; j < n; ++j) {
            out[j] += a * wr[j];
        }
    }
}

void affine_rows(const Matrix& in, const Matrix& w, const Matrix& bias, Matrix& out) {
    out.resize(in.rows(), w.cols());
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
        affine_row(in.data() + i * in.cols(), w, bias, out.data() + i * out.cols());
    }
}

void layer_norm_row(const double* in, const Matrix& gain, const Matrix& bias, int dim,
                    double* out, double* xhat, double* rstd_out) {
    double mean = 0.0;
    for (int j = 0; j < dim; ++j) {
        mean += in[j];
    }
    mean /= dim;
    double var = 0.0;
    for (int j = 0; j < dim; ++j) {
        const double c = in[j] - mean;
        var += c * c;
    }
    var /= dim;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < dim; ++j) {
        const double xh = (in[j] - mean) * rstd;
        if (xhat != nullptr) {
            xhat[j] = xh;
        }
        out[j] = xh * gain(0, j) + bias(0, j);
    }
    if (rstd_out != nullptr) {
        *rstd_out = rstd;
    }
}

// Causal attention for query row `row` of one head. `qkv` holds rows
// [q | k | v] for positions 0..row. `probs` receives row+1 weights.
void attend_row(const Matrix& qkv, Eigen::Index row, int head, int head_dim, int model_dim,
                double* probs, double* out) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const double* q = qkv.data() + row * qkv.cols() + head * head_dim;
    double max_score = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= row; ++j) {
        const double* k = qkv.data() + j * qkv.cols() + model_dim + head * head_dim;
        double s = 0.0;
        for (int d = 0; d < head_dim; ++d) {
            s += q[d] * k[d];
        }
        s *= scale;
        probs[j] = s;
        max_score = std::max(max_score, s);
    }
    double total = 0.0;
    for (Eigen::Index j = 0; j <= row; ++j) {
        probs[j] = std::exp(probs[j] - max_score);
        total += probs[j];
    }
    for (Eigen::Index j = 0; j <= row; ++j) {
        probs[j] /= total;
    }
    for (int d = 0; d < head_dim; ++d) {
        out[d] = 0.0;
    }
    for (Eigen::Index j = 0; j <= row; ++j) {
        const double* v = qkv.data() + j * qkv.cols() + 2 * model_dim + head * head_dim;
        const double p = probs[j];
        for (int d = 0; d < head_dim; ++d) {
            out[d] += p * v[d];
        }
    }
}

// d(in) for y = xhat * gain + bias given d(y), row-wise; accumulates gain and
// bias gradients.
Matrix layer_norm_backward(const Matrix& dout, const Matrix& xhat, const Matrix& rstd,
                           const Matrix& gain, Matrix& dgain, Matrix& dbias) {
    dgain += (dout.array() * xhat.array()).colwise().sum().matrix();
    dbias += dout.colwise().sum();
    const Eigen::Index dim = dout.cols();
    Matrix dxhat = dout.array().rowwise() * gain.row(0).array();
    Matrix din(dout.rows(), dim);
    for (Eigen::Index i = 0; i < dout.rows(); ++i) {
        const double mean_dxhat = dxhat.row(i).mean();
        const double mean_dxhat_xhat = (dxhat.row(i).array() * xhat.row(i).array()).mean();
        din.row(i) = rstd(i, 0) *
                     (dxhat.row(i).array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat)
                         .matrix();
    }
    return din;
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffU);
    }
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffU);
    }
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw InputError("checkpoint truncated");
    }
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | b[i];
    }
    return v;
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw InputError("checkpoint truncated");
    }
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | b[i];
    }
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const std::uint64_t n = read_u64(in);
    if (n > (1ULL << 30)) {
        throw InputError("checkpoint string length out of range");
    }
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n))) {
        throw InputError("checkpoint truncated");
    }
    return s;
}

constexpr char kCheckpointMagic[8] = {'T', 'R', 'A', 'C', 'T', 'C', 'K', 'P'};

}  // namespace

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

void ModelConfig::validate() const {
    if (vocab_size < 1 || context_len < 1 || num_layers < 1 || model_dim < 1 || num_heads < 1 ||
        ffn_dim < 1) {
        throw ConfigError("model config: all counts must be >= 1");
    }
    if (model_dim % num_heads != 0) {
        throw ConfigError("model config: model_dim (" + std::to_string(model_dim) +
                          ") not divisible by num_heads (" + std::to_string(num_heads) + ")");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"context_len", c.context_len},
                       {"num_layers", c.num_layers}, {"model_dim", c.model_dim},
                       {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_len = j.value("context_len", c.context_len);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.seed = j.value("seed", c.seed);
}

void SamplingConfig::validate() const {
    if (!(temperature > 0.0)) {
        throw ConfigError("sampling: temperature must be positive");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw ConfigError("sampling: top_p must lie in (0, 1]");
    }
    if (!(repetition_penalty >= 1.0)) {
        throw ConfigError("sampling: repetition_penalty must be >= 1");
    }
    if (max_new_tokens < 2) {
        throw ConfigError("sampling: max_new_tokens must be >= 2");
    }
}

void to_json(nlohmann::json& j, const SamplingConfig& c) {
    j = nlohmann::json{{"temperature", c.temperature},
                       {"top_p", c.top_p},
                       {"repetition_penalty", c.repetition_penalty},
                       {"max_new_tokens", c.max_new_tokens},
                       {"greedy", c.greedy}};
}

void from_json(const nlohmann::json& j, SamplingConfig& c) {
    c.temperature = j.value("temperature", c.temperature);
    c.top_p = j.value("top_p", c.top_p);
    c.repetition_penalty = j.value("repetition_penalty", c.repetition_penalty);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.greedy = j.value("greedy", c.greedy);
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// ModelParams

ModelParams ModelParams::zeros(const ModelConfig& config) {
    config.validate();
    const int v = config.vocab_size;
    const int d = config.model_dim;
    const int f = config.ffn_dim;
    ModelParams p;
    p.config = config;
    p.token_embedding = Matrix::Zero(v, d);
    p.position_embedding = Matrix::Zero(config.context_len, d);
    p.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (auto& l : p.layers) {
        l.ln1_gain = Matrix::Zero(1, d);
        l.ln1_bias = Matrix::Zero(1, d);
        l.qkv = Matrix::Zero(d, 3 * d);
        l.qkv_bias = Matrix::Zero(1, 3 * d);
        l.attn_out = Matrix::Zero(d, d);
        l.attn_out_bias = Matrix::Zero(1, d);
        l.ln2_gain = Matrix::Zero(1, d);
        l.ln2_bias = Matrix::Zero(1, d);
        l.ffn_in = Matrix::Zero(d, f);
        l.ffn_in_bias = Matrix::Zero(1, f);
        l.ffn_out = Matrix::Zero(f, d);
        l.ffn_out_bias = Matrix::Zero(1, d);
    }
    p.final_gain = Matrix::Zero(1, d);
    p.final_bias = Matrix::Zero(1, d);
    p.unembed = Matrix::Zero(d, v);
    p.unembed_bias = Matrix::Zero(1, v);
    return p;
}

std::vector<NamedTensor> ModelParams::tensors() {
    std::vector<NamedTensor> out;
    out.push_back({"token_embedding", &token_embedding});
    out.push_back({"position_embedding", &position_embedding});
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string pre = "layer" + std::to_string(i) + ".";
        auto& l = layers[i];
        out.push_back({pre + "ln1_gain", &l.ln1_gain});
        out.push_back({pre + "ln1_bias", &l.ln1_bias});
        out.push_back({pre + "qkv", &l.qkv});
        out.push_back({pre + "qkv_bias", &l.qkv_bias});
        out.push_back({pre + "attn_out", &l.attn_out});
        out.push_back({pre + "attn_out_bias", &l.attn_out_bias});
        out.push_back({pre + "ln2_gain", &l.ln2_gain});
        out.push_back({pre + "ln2_bias", &l.ln2_bias});
        out.push_back({pre + "ffn_in", &l.ffn_in});
        out.push_back({pre + "ffn_in_bias", &l.ffn_in_bias});
        out.push_back({pre + "ffn_out", &l.ffn_out});
        out.push_back({pre + "ffn_out_bias", &l.ffn_out_bias});
    }
    out.push_back({"final_gain", &final_gain});
    out.push_back({"final_bias", &final_bias});
    out.push_back({"unembed", &unembed});
    out.push_back({"unembed_bias", &unembed_bias});
    return out;
}

std::vector<ConstNamedTensor> ModelParams::tensors() const {
    std::vector<ConstNamedTensor> out;
    for (auto& t : const_cast<ModelParams*>(this)->tensors()) {
        out.push_back({t.name, t.value});
    }
    return out;
}

std::size_t ModelParams::num_values() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) {
        n += static_cast<std::size_t>(t.value->size());
    }
    return n;
}

bool ModelParams::all_finite() const {
    for (const auto& t : tensors()) {
        if (!t.value->allFinite()) {
            return false;
        }
    }
    return true;
}

void ModelParams::set_zero() {
    for (auto& t : tensors()) {
        t.value->setZero();
    }
}

void ModelParams::axpy(double alpha, const ModelParams& other) {
    auto mine = tensors();
    auto theirs = other.tensors();
    if (mine.size() != theirs.size()) {
        throw InternalError("axpy: parameter layout mismatch");
    }
    for (std::size_t i = 0; i < mine.size(); ++i) {
        if (mine[i].value->rows() != theirs[i].value->rows() ||
            mine[i].value->cols() != theirs[i].value->cols()) {
            throw InternalError("axpy: shape mismatch in " + mine[i].name);
        }
        *mine[i].value += alpha * *theirs[i].value;
    }
}

void ModelParams::scale(double alpha) {
    for (auto& t : tensors()) {
        *t.value *= alpha;
    }
}

bool ModelParams::bit_equal(const ModelParams& other) const {
    if (!(config == other.config)) {
        return false;
    }
    auto a = tensors();
    auto b = other.tensors();
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].value->rows() != b[i].value->rows() || a[i].value->cols() != b[i].value->cols()) {
            return false;
        }
        if (std::memcmp(a[i].value->data(), b[i].value->data(),
                        sizeof(double) * static_cast<std::size_t>(a[i].value->size())) != 0) {
            return false;
        }
    }
    return true;
}

ModelParams init_params(const ModelConfig& config) {
    ModelParams p = ModelParams::zeros(config);
    Rng rng(derive_seed(config.seed, 0x1417));
    const double resid_std = kInitStd / std::sqrt(2.0 * config.num_layers);
    auto fill = [&rng](Matrix& m, double stddev) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = stddev * rng.normal();
        }
    };
    fill(p.token_embedding, kInitStd);
    fill(p.position_embedding, kInitStd);
    for (auto& l : p.layers) {
        l.ln1_gain.setOnes();
        l.ln2_gain.setOnes();
        fill(l.qkv, kInitStd);
        fill(l.attn_out, resid_std);
        fill(l.ffn_in, kInitStd);
        fill(l.ffn_out, resid_std);
    }
    p.final_gain.setOnes();
    fill(p.unembed, kInitStd);
    return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

ForwardCache forward(const ModelParams& params, std::span<const Token> tokens) {
    const ModelConfig& cfg = params.config;
    const auto t_len = static_cast<Eigen::Index>(tokens.size());
    if (t_len < 1 || t_len > cfg.context_len) {
        throw InputError("forward: sequence length " + std::to_string(t_len) +
                         " outside [1, " + std::to_string(cfg.context_len) + "]");
    }
    const int d = cfg.model_dim;
    const int hd = cfg.head_dim();

    ForwardCache c;
    c.tokens.assign(tokens.begin(), tokens.end());
    Matrix h(t_len, d);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const Token tok = tokens[static_cast<std::size_t>(t)];
        if (tok < 0 || tok >= cfg.vocab_size) {
            throw InputError("forward: token id " + std::to_string(tok) + " outside vocabulary");
        }
        for (int j = 0; j < d; ++j) {
            h(t, j) = params.token_embedding(tok, j) + params.position_embedding(t, j);
        }
    }

    c.layers.resize(params.layers.size());
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const LayerParams& lp = params.layers[li];
        LayerCache& lc = c.layers[li];
        lc.input = h;
        lc.ln1_xhat.resize(t_len, d);
        lc.ln1_rstd.resize(t_len, 1);
        lc.ln1_out.resize(t_len, d);
        for (Eigen::Index t = 0; t < t_len; ++t) {
            layer_norm_row(h.data() + t * d, lp.ln1_gain, lp.ln1_bias, d,
                           lc.ln1_out.data() + t * d, lc.ln1_xhat.data() + t * d,
                           lc.ln1_rstd.data() + t);
        }
        affine_rows(lc.ln1_out, lp.qkv, lp.qkv_bias, lc.qkv);

        lc.attn_probs.assign(static_cast<std::size_t>(cfg.num_heads), Matrix::Zero(t_len, t_len));
        lc.attn_concat.resize(t_len, d);
        for (int head = 0; head < cfg.num_heads; ++head) {
            Matrix& probs = lc.attn_probs[static_cast<std::size_t>(head)];
            for (Eigen::Index t = 0; t < t_len; ++t) {
                attend_row(lc.qkv, t, head, hd, d, probs.data() + t * t_len,
                           lc.attn_concat.data() + t * d + head * hd);
            }
        }
        Matrix proj;
        affine_rows(lc.attn_concat, lp.attn_out, lp.attn_out_bias, proj);
        lc.resid_mid = h + proj;

        lc.ln2_xhat.resize(t_len, d);
        lc.ln2_rstd.resize(t_len, 1);
        lc.ln2_out.resize(t_len, d);
        for (Eigen::Index t = 0; t < t_len; ++t) {
            layer_norm_row(lc.resid_mid.data() + t * d, lp.ln2_gain, lp.ln2_bias, d,
                           lc.ln2_out.data() + t * d, lc.ln2_xhat.data() + t * d,
                           lc.ln2_rstd.data() + t);
        }
        affine_rows(lc.ln2_out, lp.ffn_in, lp.ffn_in_bias, lc.ffn_pre);
        lc.ffn_act = lc.ffn_pre.unaryExpr([](double u) { return gelu(u); });
        Matrix ffn;
        affine_rows(lc.ffn_act, lp.ffn_out, lp.ffn_out_bias, ffn);
        h = lc.resid_mid + ffn;
    }

    c.final_input = h;
    c.final_xhat.resize(t_len, d);
    c.final_rstd.resize(t_len, 1);
    c.final_out.resize(t_len, d);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        layer_norm_row(h.data() + t * d, params.final_gain, params.final_bias, d,
                       c.final_out.data() + t * d, c.final_xhat.data() + t * d,
                       c.final_rstd.data() + t);
    }
    affine_rows(c.final_out, params.unembed, params.unembed_bias, c.logits);
    return c;
}

void backward(const ModelParams& params, const ForwardCache& c, const Matrix& dlogits,
              ModelParams& g) {
    const ModelConfig& cfg = params.config;
    const Eigen::Index t_len = c.logits.rows();
    if (dlogits.rows() != t_len || dlogits.cols() != c.logits.cols()) {
        throw InternalError("backward: dlogits shape mismatch");
    }
    const int d = cfg.model_dim;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    g.unembed.noalias() += c.final_out.transpose() * dlogits;
    g.unembed_bias += dlogits.colwise().sum();
    Matrix dfinal_out = dlogits * params.unembed.transpose();
    Matrix dh = layer_norm_backward(dfinal_out, c.final_xhat, c.final_rstd, params.final_gain,
                                    g.final_gain, g.final_bias);

    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const LayerParams& lp = params.layers[li];
        const LayerCache& lc = c.layers[li];
        LayerParams& lg = g.layers[li];

        // FFN block: h_out = resid_mid + gelu(ln2_out W1 + b1) W2 + b2
        lg.ffn_out.noalias() += lc.ffn_act.transpose() * dh;
        lg.ffn_out_bias += dh.colwise().sum();
        Matrix dffn_act = dh * lp.ffn_out.transpose();
        Matrix dffn_pre =
            dffn_act.array() * lc.ffn_pre.unaryExpr([](double u) { return gelu_grad(u); }).array();
        lg.ffn_in.noalias() += lc.ln2_out.transpose() * dffn_pre;
        lg.ffn_in_bias += dffn_pre.colwise().sum();
        Matrix dln2_out = dffn_pre * lp.ffn_in.transpose();
        Matrix dresid_mid = dh + layer_norm_backward(dln2_out, lc.ln2_xhat, lc.ln2_rstd,
                                                     lp.ln2_gain, lg.ln2_gain, lg.ln2_bias);

        // Attention block: resid_mid = input + concat Wo + bo
        lg.attn_out.noalias() += lc.attn_concat.transpose() * dresid_mid;
        lg.attn_out_bias += dresid_mid.colwise().sum();
        Matrix dconcat = dresid_mid * lp.attn_out.transpose();

        Matrix dqkv = Matrix::Zero(t_len, 3 * d);
        for (int head = 0; head < cfg.num_heads; ++head) {
            const Matrix& a = lc.attn_probs[static_cast<std::size_t>(head)];
            const auto q = lc.qkv.middleCols(head * hd, hd);
            const auto k = lc.qkv.middleCols(d + head * hd, hd);
            const auto v = lc.qkv.middleCols(2 * d + head * hd, hd);
            const auto dout = dconcat.middleCols(head * hd, hd);
            dqkv.middleCols(2 * d + head * hd, hd).noalias() += a.transpose() * dout;
            Matrix da = dout * v.transpose();
            Matrix ds(t_len, t_len);
            for (Eigen::Index i = 0; i < t_len; ++i) {
                double dot = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    dot += a(i, j) * da(i, j);
                }
                for (Eigen::Index j = 0; j < t_len; ++j) {
                    ds(i, j) = j <= i ? a(i, j) * (da(i, j) - dot) * scale : 0.0;
                }
            }
            dqkv.middleCols(head * hd, hd).noalias() += ds * k;
            dqkv.middleCols(d + head * hd, hd).noalias() += ds.transpose() * q;
        }
        lg.qkv.noalias() += lc.ln1_out.transpose() * dqkv;
        lg.qkv_bias += dqkv.colwise().sum();
        Matrix dln1_out = dqkv * lp.qkv.transpose();
        dh = dresid_mid + layer_norm_backward(dln1_out, lc.ln1_xhat, lc.ln1_rstd, lp.ln1_gain,
                                              lg.ln1_gain, lg.ln1_bias);
    }

    for (Eigen::Index t = 0; t < t_len; ++t) {
        const Token tok = c.tokens[static_cast<std::size_t>(t)];
        g.token_embedding.row(tok) += dh.row(t);
        g.position_embedding.row(t) += dh.row(t);
    }
}

void softmax_row(std::span<const double> logits, std::span<double> out) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double z : logits) {
        max_logit = std::max(max_logit, z);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max_logit);
        total += out[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] /= total;
    }
}

std::vector<double> log_softmax_row(std::span<const double> logits) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double z : logits) {
        max_logit = std::max(max_logit, z);
    }
    double total = 0.0;
    for (double z : logits) {
        total += std::exp(z - max_logit);
    }
    const double log_norm = max_logit + std::log(total);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - log_norm;
    }
    return out;
}

NextTokenDist forward_next_token(const ModelParams& params, std::span<const Token> prefix) {
    if (prefix.empty()) {
        throw InputError("forward_next_token: empty prefix");
    }
    if (static_cast<int>(prefix.size()) > params.config.context_len) {
        throw InputError("forward_next_token: prefix longer than context");
    }
    IncrementalDecoder dec(params);
    std::span<const double> logits;
    for (Token t : prefix) {
        logits = dec.push(t);
    }
    NextTokenDist dist;
    dist.probs.resize(logits.size());
    softmax_row(logits, dist.probs);
    return dist;
}

std::vector<double> token_logprobs(const ModelParams& params, std::span<const Token> prefix,
                                   std::span<const Token> continuation) {
    if (prefix.empty()) {
        throw InputError("token_logprobs: empty prefix");
    }
    if (static_cast<int>(prefix.size() + continuation.size()) > params.config.context_len) {
        throw InputError("token_logprobs: prefix + continuation exceeds context");
    }
    std::vector<double> out;
    if (continuation.empty()) {
        return out;
    }
    TokenSeq seq(prefix.begin(), prefix.end());
    // The final continuation token is never an input.
    seq.insert(seq.end(), continuation.begin(), continuation.end() - 1);
    const ForwardCache c = forward(params, seq);
    out.reserve(continuation.size());
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(prefix.size() - 1 + i);
        const auto lp = log_softmax_row(
            std::span<const double>(c.logits.data() + row * c.logits.cols(),
                                    static_cast<std::size_t>(c.logits.cols())));
        out.push_back(lp[static_cast<std::size_t>(continuation[i])]);
    }
    return out;
}

double sequence_logprob(const ModelParams& params, std::span<const Token> prefix,
                        std::span<const Token> continuation) {
    double total = 0.0;
    for (double lp : token_logprobs(params, prefix, continuation)) {
        total += lp;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Incremental decoding

IncrementalDecoder::IncrementalDecoder(const ModelParams& params) : params_(&params) {
    const ModelConfig& cfg = params.config;
    qkv_.assign(params.layers.size(), Matrix::Zero(cfg.context_len, 3 * cfg.model_dim));
    hidden_.resize(static_cast<std::size_t>(cfg.model_dim));
    normed_.resize(hidden_.size());
    scratch_.resize(hidden_.size());
    attn_.resize(hidden_.size());
    ffn_pre_.resize(static_cast<std::size_t>(cfg.ffn_dim));
    ffn_act_.resize(ffn_pre_.size());
    probs_.resize(static_cast<std::size_t>(cfg.context_len));
    logits_.resize(static_cast<std::size_t>(cfg.vocab_size));
}

std::span<const double> IncrementalDecoder::push(Token token) {
    const ModelParams& p = *params_;
    const ModelConfig& cfg = p.config;
    if (length_ >= cfg.context_len) {
        throw InputError("decoder: context length exceeded");
    }
    if (token < 0 || token >= cfg.vocab_size) {
        throw InputError("decoder: token id " + std::to_string(token) + " outside vocabulary");
    }
    const int d = cfg.model_dim;
    const int hd = cfg.head_dim();
    const Eigen::Index t = length_;
    for (int j = 0; j < d; ++j) {
        hidden_[static_cast<std::size_t>(j)] =
            p.token_embedding(token, j) + p.position_embedding(t, j);
    }
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const LayerParams& lp = p.layers[li];
        Matrix& qkv = qkv_[li];
        layer_norm_row(hidden_.data(), lp.ln1_gain, lp.ln1_bias, d, normed_.data(), nullptr,
                       nullptr);
        affine_row(normed_.data(), lp.qkv, lp.qkv_bias, qkv.data() + t * qkv.cols());
        for (int head = 0; head < cfg.num_heads; ++head) {
            attend_row(qkv, t, head, hd, d, probs_.data(), attn_.data() + head * hd);
        }
        affine_row(attn_.data(), lp.attn_out, lp.attn_out_bias, scratch_.data());
        for (int j = 0; j < d; ++j) {
            hidden_[static_cast<std::size_t>(j)] += scratch_[static_cast<std::size_t>(j)];
        }
        layer_norm_row(hidden_.data(), lp.ln2_gain, lp.ln2_bias, d, normed_.data(), nullptr,
                       nullptr);
        affine_row(normed_.data(), lp.ffn_in, lp.ffn_in_bias, ffn_pre_.data());
        for (std::size_t j = 0; j < ffn_pre_.size(); ++j) {
            ffn_act_[j] = gelu(ffn_pre_[j]);
        }
        affine_row(ffn_act_.data(), lp.ffn_out, lp.ffn_out_bias, scratch_.data());
        for (int j = 0; j < d; ++j) {
            hidden_[static_cast<std::size_t>(j)] += scratch_[static_cast<std::size_t>(j)];
        }
    }
    layer_norm_row(hidden_.data(), p.final_gain, p.final_bias, d, normed_.data(), nullptr,
                   nullptr);
    affine_row(normed_.data(), p.unembed, p.unembed_bias, logits_.data());
    ++length_;
    return logits_;
}

// ---------------------------------------------------------------------------
// Sampling

bool StopRule::should_stop(std::span<const Token> generated) const {
    if (kind == Kind::None || delimiter.empty()) {
        return false;
    }
    const std::size_t n = generated.size();
    const std::size_t m = delimiter.size();
    const std::size_t tail = kind == Kind::DelimiterPlusOne ? 1 : 0;
    if (n < m + tail) {
        return false;
    }
    return std::equal(delimiter.begin(), delimiter.end(), generated.end() - tail - m);
}

Token argmax_token(std::span<const double> values) {
    Token best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)]) {
            best = static_cast<Token>(i);
        }
    }
    return best;
}

Token sample_from_logits(std::span<const double> logits, std::span<const Token> generated,
                         const SamplingConfig& sampling, Rng& rng) {
    if (sampling.greedy) {
        return argmax_token(logits);
    }
    std::vector<double> z(logits.begin(), logits.end());
    if (sampling.repetition_penalty != 1.0) {
        std::vector<bool> seen(z.size(), false);
        for (Token t : generated) {
            seen[static_cast<std::size_t>(t)] = true;
        }
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (seen[i]) {
                z[i] = z[i] > 0.0 ? z[i] / sampling.repetition_penalty
                                  : z[i] * sampling.repetition_penalty;
            }
        }
    }
    for (double& v : z) {
        v /= sampling.temperature;
    }
    std::vector<double> probs(z.size());
    softmax_row(z, probs);

    std::vector<Token> order(z.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Token a, Token b) {
        return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    });
    std::size_t keep = 0;
    double cumulative = 0.0;
    while (keep < order.size()) {
        cumulative += probs[static_cast<std::size_t>(order[keep])];
        ++keep;
        if (cumulative >= sampling.top_p) {
            break;
        }
    }
    const double u = rng.uniform() * cumulative;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        acc += probs[static_cast<std::size_t>(order[i])];
        if (u < acc) {
            return order[i];
        }
    }
    return order[keep - 1];
}

SampleResult sample_sequence(const ModelParams& params, std::span<const Token> prefix,
                             const SamplingConfig& sampling, const StopRule& stop,
                             std::uint64_t rng_seed) {
    sampling.validate();
    if (prefix.empty() || static_cast<int>(prefix.size()) > params.config.context_len) {
        throw InputError("sample_sequence: prefix does not fit the context");
    }
    Rng rng(rng_seed);
    IncrementalDecoder dec(params);
    std::span<const double> logits;
    for (Token t : prefix) {
        logits = dec.push(t);
    }
    SampleResult result;
    while (true) {
        const Token next = sample_from_logits(logits, result.tokens, sampling, rng);
        result.tokens.push_back(next);
        if (stop.should_stop(result.tokens)) {
            return result;
        }
        if (static_cast<int>(result.tokens.size()) >= sampling.max_new_tokens ||
            dec.length() >= params.config.context_len) {
            result.truncated = true;
            return result;
        }
        logits = dec.push(next);
    }
}

// ---------------------------------------------------------------------------
// Optimizer

void apply_update(ModelParams& params, const ModelParams& grads, OptimizerState& state,
                  double learning_rate) {
    auto p = params.tensors();
    auto g = grads.tensors();
    if (p.size() != g.size()) {
        throw InternalError("apply_update: parameter layout mismatch");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i].value->rows() != g[i].value->rows() || p[i].value->cols() != g[i].value->cols()) {
            throw InternalError("apply_update: shape mismatch in " + p[i].name);
        }
    }
    ++state.step;
    if (learning_rate == 0.0) {
        return;
    }
    if (state.config.kind == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            *p[i].value -= learning_rate * *g[i].value;
        }
        return;
    }
    if (!state.first_moment) {
        state.first_moment = ModelParams::zeros(params.config);
        state.second_moment = ModelParams::zeros(params.config);
    }
    auto m = state.first_moment->tensors();
    auto v = state.second_moment->tensors();
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto& mi = *m[i].value;
        auto& vi = *v[i].value;
        const auto& gi = *g[i].value;
        mi = b1 * mi + (1.0 - b1) * gi;
        vi = b2 * vi + (1.0 - b2) * gi.cwiseProduct(gi);
        p[i].value->array() -= learning_rate * (mi.array() / c1) /
                               ((vi.array() / c2).sqrt() + state.config.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Seed-model pretraining

namespace {

double next_token_ce_and_grad(const ModelParams& params, const TokenSeq& seq, ModelParams* grads,
                              double weight) {
    const ForwardCache c = forward(params, seq);
    const Eigen::Index t_len = c.logits.rows();
    Matrix dlogits = Matrix::Zero(t_len, c.logits.cols());
    double loss = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(c.logits.cols()));
    for (Eigen::Index t = 0; t + 1 < t_len; ++t) {
        const std::span<const double> row(c.logits.data() + t * c.logits.cols(),
                                          static_cast<std::size_t>(c.logits.cols()));
        const auto lp = log_softmax_row(row);
        const auto target = static_cast<std::size_t>(seq[static_cast<std::size_t>(t + 1)]);
        loss -= lp[target];
        if (grads != nullptr) {
            softmax_row(row, probs);
            for (Eigen::Index j = 0; j < c.logits.cols(); ++j) {
                dlogits(t, j) = weight * probs[static_cast<std::size_t>(j)];
            }
            dlogits(t, static_cast<Eigen::Index>(target)) -= weight;
        }
    }
    if (grads != nullptr) {
        backward(params, c, dlogits, *grads);
    }
    return loss;
}

}  // namespace

double corpus_cross_entropy(const ModelParams& params, const std::vector<TokenSeq>& corpus) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) {
            continue;
        }
        total += next_token_ce_and_grad(params, seq, nullptr, 0.0);
        count += seq.size() - 1;
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

PretrainResult pretrain_seed(const ModelConfig& config, const std::vector<TokenSeq>& corpus,
                             const PretrainConfig& pretrain,
                             const std::function<void(int, double)>& on_step) {
    if (corpus.empty()) {
        throw InputError("pretrain_seed: empty corpus");
    }
    PretrainResult result{init_params(config), 0.0, 0.0};
    if (pretrain.steps <= 0) {
        return result;
    }
    OptimizerState opt;
    ModelParams grads = ModelParams::zeros(config);
    const int window = std::max(1, std::min(50, pretrain.steps / 10));
    double first_window = 0.0;
    double last_window = 0.0;
    for (int step = 0; step < pretrain.steps; ++step) {
        grads.set_zero();
        Rng rng(derive_seed(pretrain.seed, 0x9e7, static_cast<std::uint64_t>(step)));
        std::vector<std::size_t> picks;
        for (int b = 0; b < pretrain.batch_size; ++b) {
            picks.push_back(static_cast<std::size_t>(rng.below(corpus.size())));
        }
        double loss = 0.0;
        std::size_t tokens = 0;
        for (auto i : picks) {
            tokens += corpus[i].size() - 1;
        }
        const double weight = 1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1));
        for (auto i : picks) {
            loss += next_token_ce_and_grad(result.params, corpus[i], &grads, weight);
        }
        loss *= weight;
        apply_update(result.params, grads, opt, pretrain.learning_rate);
        if (step < window) {
            first_window += loss / window;
        }
        if (step >= pretrain.steps - window) {
            last_window += loss / window;
        }
        if (on_step) {
            on_step(step, loss);
        }
    }
    result.initial_loss = first_window;
    result.final_loss = last_window;
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointInfo& info) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot open checkpoint for writing: " + path.string());
    }
    nlohmann::json header{{"format_version", kCheckpointVersion},
                          {"config", params.config},
                          {"role", info.role},
                          {"init_from", info.init_from},
                          {"extra", info.extra}};
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_u32(out, kCheckpointVersion);
    write_string(out, header.dump());
    const auto tensors = params.tensors();
    write_u64(out, tensors.size());
    for (const auto& t : tensors) {
        write_string(out, t.name);
        write_u64(out, static_cast<std::uint64_t>(t.value->rows()));
        write_u64(out, static_cast<std::uint64_t>(t.value->cols()));
        for (Eigen::Index i = 0; i < t.value->size(); ++i) {
            std::uint64_t bits = 0;
            const double v = t.value->data()[i];
            std::memcpy(&bits, &v, sizeof(bits));
            write_u64(out, bits);
        }
    }
    if (!out) {
        throw InputError("failed writing checkpoint: " + path.string());
    }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open checkpoint: " + path.string());
    }
    char magic[sizeof(kCheckpointMagic)];
    if (!in.read(magic, sizeof(magic)) ||
        std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw InputError("not a checkpoint file: " + path.string());
    }
    const std::uint32_t version = read_u32(in);
    if (version != kCheckpointVersion) {
        throw InputError("unsupported checkpoint version " + std::to_string(version));
    }
    const nlohmann::json header = nlohmann::json::parse(read_string(in));
    LoadedCheckpoint lc{ModelParams::zeros(header.at("config").get<ModelConfig>()), {}};
    lc.info.role = header.value("role", "");
    lc.info.init_from = header.value("init_from", "");
    lc.info.extra = header.value("extra", nlohmann::json::object());
    auto tensors = lc.params.tensors();
    const std::uint64_t count = read_u64(in);
    if (count != tensors.size()) {
        throw InputError("checkpoint tensor count does not match its config");
    }
    for (auto& t : tensors) {
        const std::string name = read_string(in);
        const std::uint64_t rows = read_u64(in);
        const std::uint64_t cols = read_u64(in);
        if (name != t.name || rows != static_cast<std::uint64_t>(t.value->rows()) ||
            cols != static_cast<std::uint64_t>(t.value->cols())) {
            throw InputError("checkpoint tensor '" + name + "' does not match expected '" +
                             t.name + "'");
        }
        for (Eigen::Index i = 0; i < t.value->size(); ++i) {
            const std::uint64_t bits = read_u64(in);
            double v = 0.0;
            std::memcpy(&v, &bits, sizeof(v));
            t.value->data()[i] = v;
        }
    }
    return lc;
}

}  // namespace tract

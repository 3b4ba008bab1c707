#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tract/common.hpp"

namespace tract {

struct ModelConfig {
    int vocab_size = 128;
    int context_len = 128;
    int num_layers = 2;
    int model_dim = 64;
    int num_heads = 4;
    int ffn_dim = 256;
    std::uint64_t seed = 0;

    // Throws ConfigError.
    void validate() const;
    int head_dim() const { return model_dim / num_heads; }

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerParams {
    Matrix ln1_gain, ln1_bias;  // 1 x D
    Matrix qkv, qkv_bias;       // D x 3D, 1 x 3D
    Matrix attn_out, attn_out_bias;
    Matrix ln2_gain, ln2_bias;
    Matrix ffn_in, ffn_in_bias;   // D x F
    Matrix ffn_out, ffn_out_bias; // F x D
};

struct NamedTensor {
    std::string name;
    Matrix* value;
};

struct ConstNamedTensor {
    std::string name;
    const Matrix* value;
};

// All learnable arrays of the decoder-only model. Gradients and optimizer
// moments reuse this type so that every array lines up by position.
struct ModelParams {
    ModelConfig config;
    Matrix token_embedding;     // V x D
    Matrix position_embedding;  // C x D
    std::vector<LayerParams> layers;
    Matrix final_gain, final_bias;
    Matrix unembed, unembed_bias;  // D x V, 1 x V

    // Zero-filled arrays with the shapes implied by `config`.
    static ModelParams zeros(const ModelConfig& config);

    // Stable order; checkpoints and optimizers rely on it.
    std::vector<NamedTensor> tensors();
    std::vector<ConstNamedTensor> tensors() const;

    std::size_t num_values() const;
    bool all_finite() const;
    void set_zero();
    // this += alpha * other
    void axpy(double alpha, const ModelParams& other);
    void scale(double alpha);

    bool bit_equal(const ModelParams& other) const;
};

struct NextTokenDist {
    std::vector<double> probs;
};

struct SamplingConfig {
    double temperature = 1.0;
    double top_p = 0.9;
    double repetition_penalty = 1.03;
    int max_new_tokens = 64;
    bool greedy = false;

    void validate() const;
    bool operator==(const SamplingConfig&) const = default;
};

void to_json(nlohmann::json& j, const SamplingConfig& c);
void from_json(const nlohmann::json& j, SamplingConfig& c);

ModelParams init_params(const ModelConfig& config);

// Activations retained for the backward pass.
struct LayerCache {
    Matrix input;
    Matrix ln1_xhat, ln1_rstd, ln1_out;
    Matrix qkv;
    std::vector<Matrix> attn_probs;  // one T x T matrix per head
    Matrix attn_concat;
    Matrix resid_mid;
    Matrix ln2_xhat, ln2_rstd, ln2_out;
    Matrix ffn_pre, ffn_act;
};

struct ForwardCache {
    TokenSeq tokens;
    std::vector<LayerCache> layers;
    Matrix final_input;
    Matrix final_xhat, final_rstd, final_out;
    Matrix logits;  // T x V
};

// Teacher-forced pass over the whole sequence. Row t of the logits scores
// the token at position t + 1.
ForwardCache forward(const ModelParams& params, std::span<const Token> tokens);

// Accumulates into `grads` the gradient of sum(dlogits .* logits).
void backward(const ModelParams& params, const ForwardCache& cache, const Matrix& dlogits,
              ModelParams& grads);

void softmax_row(std::span<const double> logits, std::span<double> out);
std::vector<double> log_softmax_row(std::span<const double> logits);

NextTokenDist forward_next_token(const ModelParams& params, std::span<const Token> prefix);

// Per-token log-probabilities of `continuation` given `prefix`.
std::vector<double> token_logprobs(const ModelParams& params, std::span<const Token> prefix,
                                   std::span<const Token> continuation);

// Left fold of token_logprobs.
double sequence_logprob(const ModelParams& params, std::span<const Token> prefix,
                        std::span<const Token> continuation);

// Single-position incremental evaluation. Produces logits bit-identical to
// forward() because both run the same row kernels.
class IncrementalDecoder {
public:
    explicit IncrementalDecoder(const ModelParams& params);

    // Appends one token; returns the logits for the following position.
    std::span<const double> push(Token token);
    int length() const { return length_; }

private:
    const ModelParams* params_;
    std::vector<Matrix> qkv_;
    int length_ = 0;
    std::vector<double> hidden_, normed_, scratch_, ffn_pre_, ffn_act_, attn_, probs_, logits_;
};

// Decides whether generation should halt after the tokens produced so far.
struct StopRule {
    enum class Kind { DelimiterPlusOne, AtDelimiter, None };
    Kind kind = Kind::DelimiterPlusOne;
    TokenSeq delimiter;

    bool should_stop(std::span<const Token> generated) const;
};

struct SampleResult {
    TokenSeq tokens;  // newly generated tokens only
    bool truncated = false;
};

SampleResult sample_sequence(const ModelParams& params, std::span<const Token> prefix,
                             const SamplingConfig& sampling, const StopRule& stop,
                             std::uint64_t rng_seed);

// Applies temperature, repetition penalty and nucleus truncation, then draws
// one token. Exposed for the sampler's frequency tests.
Token sample_from_logits(std::span<const double> logits, std::span<const Token> generated,
                         const SamplingConfig& sampling, Rng& rng);

Token argmax_token(std::span<const double> values);

enum class OptimizerKind { Adam, Sgd };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    OptimizerConfig config;
    std::int64_t step = 0;
    std::optional<ModelParams> first_moment;
    std::optional<ModelParams> second_moment;
};

void apply_update(ModelParams& params, const ModelParams& grads, OptimizerState& state,
                  double learning_rate);

struct PretrainConfig {
    int steps = 6000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 7;

    bool operator==(const PretrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainResult {
    ModelParams params;
    double initial_loss = 0.0;  // mean next-token CE over the first batch window
    double final_loss = 0.0;
};

// Next-token CE training on an unlabeled corpus; produces the seed model.
PretrainResult pretrain_seed(const ModelConfig& config, const std::vector<TokenSeq>& corpus,
                             const PretrainConfig& pretrain,
                             const std::function<void(int, double)>& on_step = {});

// Mean per-token next-token CE over the corpus.
double corpus_cross_entropy(const ModelParams& params, const std::vector<TokenSeq>& corpus);

struct CheckpointInfo {
    std::string role;       // p0 | p_s | p_tract | ...
    std::string init_from;  // provenance of the initial weights
    nlohmann::json extra = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointInfo& info);

struct LoadedCheckpoint {
    ModelParams params;
    CheckpointInfo info;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tract

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prunekit/rng.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

struct ModelConfig {
    int vocab = 256; // byte-level, so calibration files are raw text
    int d_model = 64;
    int n_blocks = 4;
    int n_heads = 4;
    int head_dim = 16;
    int d_mlp = 256;
    int max_seq = 64;

    // Throws ConfigError unless all counts are >= 1 and
    // d_model == n_heads * head_dim (the unpruned layout).
    void validate() const;
};

// The two prunable granularities per block: MLP intermediate channels
// (inputs of w_down) and attention heads (inputs of wo, head_dim at a time).
enum class SiteKind { AttnHeads, MlpChannels };

struct PruneSite {
    int block = 0;
    SiteKind kind = SiteKind::AttnHeads;

    bool operator==(const PruneSite &) const = default;
};

std::string site_kind_name(SiteKind k);

// Decoder block. Weights are stored (out_features x in_features), so pruning
// an MLP channel drops one row of w_gate/w_up and one column of w_down, and
// pruning a head drops head_dim rows of wq/wk/wv and head_dim columns of wo.
// The output biases bo/bd exist from init (zeros) and are the landing sites
// for pruning compensation.
struct Block {
    std::vector<float> norm1, norm2; // RMS-norm scales, never pruned
    Tensor2 wq, wk, wv;              // (n_heads_live*head_dim) x d_model
    Tensor2 wo;                      // d_model x (n_heads_live*head_dim)
    std::vector<float> bo;           // d_model
    Tensor2 w_gate, w_up;            // d_mlp_live x d_model
    Tensor2 w_down;                  // d_model x d_mlp_live
    std::vector<float> bd;           // d_model
    int n_heads_live = 0;
    int d_mlp_live = 0;
};

struct Model {
    ModelConfig cfg; // init-time shapes; live shapes are per block
    Tensor2 tok_emb; // vocab x d_model
    Tensor2 pos_emb; // max_seq x d_model (learned absolute positions)
    std::vector<Block> blocks;
    std::vector<float> final_norm; // d_model
    Tensor2 w_out;                 // vocab x d_model
};

// Activations captured at a prunable site during forward:
// (tokens x channels), the inputs of wo or w_down.
struct ActivationTap {
    PruneSite site;
    Tensor2 values;
};

// Canonical site order: block 0 attention, block 0 MLP, block 1 attention, ...
std::vector<PruneSite> prune_sites(const Model &m);
int site_index(const Model &m, PruneSite site);
int site_channels(const Model &m, PruneSite site); // live input channels
int site_units(const Model &m, PruneSite site);    // heads or channels

// Weights ~ Normal(0, 0.02), biases zero, norms one; deterministic per seed.
Model init_model(const ModelConfig &cfg, Rng &rng);

// Causal forward pass. Returns (len x vocab) logits; when taps is non-null it
// receives exactly one ActivationTap per site in canonical order.
Tensor2 forward(const Model &m, std::span<const int> tokens,
                std::vector<ActivationTap> *taps = nullptr);

// File format: magic "PKIT", version u32 LE, length-prefixed JSON header
// (config + per-block live-shape table), then little-endian f32 blobs in
// declared order. Round-trips are bit-identical.
std::vector<uint8_t> model_to_bytes(const Model &m);
Model model_from_bytes(const std::vector<uint8_t> &bytes);
void save_model(const Model &m, const std::string &path);
Model load_model(const std::string &path);

// FNV-1a over the serialized bytes; used to key stats caches and to make
// determinism claims checkable in reports.
uint64_t model_hash(const Model &m);
std::string hash_hex(uint64_t h);

} // namespace prunekit

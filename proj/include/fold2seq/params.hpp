#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fold2seq/tensor.hpp"

namespace fold2seq::tc {

// Named parameter with a persistent gradient accumulator. Non-trainable
// entries (batch-norm running statistics) are checkpointed but never updated
// by the optimizer and never receive gradients.
struct ParamTensor {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

// Registry of all model state, in insertion order. Addresses are stable, so
// graphs may hold ParamTensor pointers across the store's lifetime.
class ParamStore {
public:
    ParamTensor& add(const std::string& name, Tensor init, bool trainable = true);
    ParamTensor& at(const std::string& name);
    const ParamTensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<ParamTensor*> all();
    std::vector<const ParamTensor*> all() const;

    void zero_grads();
    size_t parameter_count() const;  // trainable values only

private:
    std::vector<std::unique_ptr<ParamTensor>> list_;
    std::map<std::string, size_t> index_;
};

// Named-tensor archive: 8-byte magic "F2SCKPT\0", u32 version, u32 JSON index
// length, the JSON index {tensors: {name -> shape/dtype/offset/trainable},
// meta: {string -> string}}, then the raw little-endian f64 payload.
constexpr uint32_t kCheckpointFormatVersion = 1;

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::map<std::string, std::string>& meta);

// Strict load: the archive must contain exactly the store's names with
// matching shapes. Returns the meta map.
std::map<std::string, std::string> load_checkpoint(const std::string& path, ParamStore& store);

// Reads only the meta map (to reconstruct a model before loading values).
std::map<std::string, std::string> read_checkpoint_meta(const std::string& path);

}  // namespace fold2seq::tc

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "iert/parameters.hpp"
#include "iert/tensor.hpp"

namespace iert {

/// On-disk checkpoint: a plain-text manifest followed by one blob of
/// little-endian IEEE-754 doubles.
///
///   iert-checkpoint 1
///   meta <key>=<value>                    (zero or more, sorted by key)
///   tensor <name> <d0>x<d1>... <byte-offset> <element-count>
///   blob <byte-count> <fnv1a64-hex>
///   end
///   <blob bytes>
///
/// Tensors are laid out in name order, offsets are relative to the first
/// blob byte, and the hash covers the blob exactly. Loading verifies the
/// header, the blob length, and the hash before returning anything.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor> tensors;
};

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every store parameter into `checkpoint.tensors` under its own name.
void put_parameters(Checkpoint& checkpoint, const ParameterStore& store);
/// Adam moments go under "adam.m/<name>" and "adam.v/<name>", scalars into meta.
void put_adam(Checkpoint& checkpoint, const AdamState& adam);
void take_adam(const Checkpoint& checkpoint, AdamState& adam);

/// Tensors of `checkpoint` that are not optimizer state.
std::map<std::string, Tensor> model_tensors(const Checkpoint& checkpoint);

}  // namespace iert

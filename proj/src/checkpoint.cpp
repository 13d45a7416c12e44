#include "iert/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "iert/error.hpp"

namespace iert {

namespace {

constexpr const char* kMagic = "iert-checkpoint 1";
constexpr const char* kAdamMoment1 = "adam.m/";
constexpr const char* kAdamMoment2 = "adam.v/";

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& why) {
  fail(ErrorKind::kCorruptCheckpoint, "checkpoint " + path.string() + ": " + why);
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = text.find('x', start);
    const std::string part = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    shape.push_back(std::stoull(part));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return shape;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::vector<unsigned char> blob;
  std::ostringstream tensor_lines;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    require(name.find_first_of(" \t\n") == std::string::npos, ErrorKind::kContract,
            "checkpoint: tensor name '" + name + "' contains whitespace");
    std::string dims;
    for (std::size_t i = 0; i < tensor.shape().size(); ++i) {
      if (i > 0) dims += "x";
      dims += std::to_string(tensor.shape()[i]);
    }
    tensor_lines << "tensor " << name << " " << dims << " " << blob.size() << " " << tensor.size()
                 << "\n";
    for (double v : tensor.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
  }
  std::ostringstream header;
  header << kMagic << "\n";
  for (const auto& [key, value] : checkpoint.meta) {
    require(key.find_first_of("= \t\n") == std::string::npos && value.find('\n') == std::string::npos,
            ErrorKind::kContract, "checkpoint: meta entry '" + key + "' not representable");
    header << "meta " << key << "=" << value << "\n";
  }
  header << tensor_lines.str();
  header << "blob " << blob.size() << " " << hex64(fnv1a64(blob)) << "\n";
  header << "end\n";

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + tmp.string());
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    require(static_cast<bool>(out), ErrorKind::kIo, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open checkpoint " + path.string());
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
    std::size_t count;
  };
  std::vector<Entry> entries;
  Checkpoint checkpoint;
  std::size_t pos = 0;
  std::size_t blob_bytes = 0;
  std::string blob_hash;
  bool saw_magic = false, saw_blob = false, saw_end = false;
  while (pos < contents.size()) {
    const std::size_t eol = contents.find('\n', pos);
    if (eol == std::string::npos) corrupt(path, "truncated header");
    const std::string line = contents.substr(pos, eol - pos);
    pos = eol + 1;
    if (!saw_magic) {
      if (line != kMagic) corrupt(path, "bad magic line");
      saw_magic = true;
      continue;
    }
    if (line == "end") {
      saw_end = true;
      break;
    }
    std::istringstream fields(line);
    std::string tag;
    fields >> tag;
    try {
      if (tag == "meta") {
        const std::string rest = line.substr(5);
        const std::size_t eq = rest.find('=');
        if (eq == std::string::npos) corrupt(path, "meta line without '='");
        checkpoint.meta[rest.substr(0, eq)] = rest.substr(eq + 1);
      } else if (tag == "tensor") {
        Entry e;
        std::string dims;
        if (!(fields >> e.name >> dims >> e.offset >> e.count)) corrupt(path, "bad tensor line: " + line);
        e.shape = parse_shape(dims);
        if (shape_size(e.shape) != e.count) corrupt(path, "shape/count mismatch for " + e.name);
        entries.push_back(std::move(e));
      } else if (tag == "blob") {
        if (!(fields >> blob_bytes >> blob_hash)) corrupt(path, "bad blob line");
        saw_blob = true;
      } else {
        corrupt(path, "unknown manifest line: " + line);
      }
    } catch (const std::invalid_argument&) {
      corrupt(path, "unparseable manifest line: " + line);
    } catch (const std::out_of_range&) {
      corrupt(path, "unparseable manifest line: " + line);
    }
  }
  if (!saw_magic || !saw_end || !saw_blob) corrupt(path, "incomplete manifest");
  if (contents.size() - pos != blob_bytes) {
    corrupt(path, "blob is " + std::to_string(contents.size() - pos) + " bytes, manifest says " +
                      std::to_string(blob_bytes));
  }
  std::span<const unsigned char> blob(reinterpret_cast<const unsigned char*>(contents.data()) + pos,
                                      blob_bytes);
  if (hex64(fnv1a64(blob)) != blob_hash) corrupt(path, "blob hash mismatch");
  for (const Entry& e : entries) {
    if (e.offset % 8 != 0 || e.offset + 8 * e.count > blob_bytes) corrupt(path, "tensor " + e.name + " outside blob");
    std::vector<double> values(e.count);
    for (std::size_t i = 0; i < e.count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(blob[e.offset + 8 * i + b]) << (8 * b);
      values[i] = std::bit_cast<double>(bits);
    }
    checkpoint.tensors.emplace(e.name, Tensor(e.shape, std::move(values)));
  }
  return checkpoint;
}

void put_parameters(Checkpoint& checkpoint, const ParameterStore& store) {
  for (const auto& [name, value] : store.values()) checkpoint.tensors[name] = value;
}

void put_adam(Checkpoint& checkpoint, const AdamState& adam) {
  checkpoint.meta["adam.learning_rate"] = format_double(adam.learning_rate);
  checkpoint.meta["adam.beta1"] = format_double(adam.beta1);
  checkpoint.meta["adam.beta2"] = format_double(adam.beta2);
  checkpoint.meta["adam.epsilon"] = format_double(adam.epsilon);
  checkpoint.meta["adam.step"] = std::to_string(adam.step);
  for (const auto& [name, m] : adam.first_moment) checkpoint.tensors[kAdamMoment1 + name] = m;
  for (const auto& [name, v] : adam.second_moment) checkpoint.tensors[kAdamMoment2 + name] = v;
}

void take_adam(const Checkpoint& checkpoint, AdamState& adam) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = checkpoint.meta.find(key);
    require(it != checkpoint.meta.end(), ErrorKind::kCorruptCheckpoint,
            "checkpoint has no optimizer entry '" + key + "'");
    return it->second;
  };
  adam.learning_rate = std::stod(get("adam.learning_rate"));
  adam.beta1 = std::stod(get("adam.beta1"));
  adam.beta2 = std::stod(get("adam.beta2"));
  adam.epsilon = std::stod(get("adam.epsilon"));
  adam.step = std::stoull(get("adam.step"));
  adam.first_moment.clear();
  adam.second_moment.clear();
  const std::string m1 = kAdamMoment1, m2 = kAdamMoment2;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    if (name.starts_with(m1)) adam.first_moment[name.substr(m1.size())] = tensor;
    if (name.starts_with(m2)) adam.second_moment[name.substr(m2.size())] = tensor;
  }
}

std::map<std::string, Tensor> model_tensors(const Checkpoint& checkpoint) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    if (name.starts_with(kAdamMoment1) || name.starts_with(kAdamMoment2)) continue;
    out.emplace(name, tensor);
  }
  return out;
}

}  // namespace iert

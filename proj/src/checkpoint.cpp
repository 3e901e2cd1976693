#include "deqr/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "deqr/errors.hpp"

namespace deqr {

namespace {

constexpr char kMagic[4] = {'D', 'E', 'Q', 'R'};

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u64(out, t.numel());
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    write_u64(out, bits);
  }
}

void write_blob(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (in.gcount() != 4) {
    throw TruncationError(std::string("checkpoint: truncated while reading ") +
                          what);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (in.gcount() != 8) {
    throw TruncationError(std::string("checkpoint: truncated while reading ") +
                          what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in, const char* what) {
  const std::uint64_t bits = read_u64(in, what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

Tensor read_tensor(std::istream& in, std::vector<std::size_t> shape,
                   const char* what) {
  const std::uint64_t count = read_u64(in, what);
  std::size_t expected = 1;
  for (std::size_t d : shape) expected *= d;
  if (count != expected) {
    throw DimensionError(std::string("checkpoint: ") + what + " has " +
                         std::to_string(count) + " entries, expected " +
                         std::to_string(expected));
  }
  std::vector<double> data(count);
  for (std::uint64_t i = 0; i < count; ++i) data[i] = read_f64(in, what);
  return Tensor(std::move(shape), std::move(data));
}

std::string read_blob(std::istream& in, const char* what) {
  const std::uint32_t len = read_u32(in, what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) {
    throw TruncationError(std::string("checkpoint: truncated while reading ") +
                          what);
  }
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ckpt.model.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open '" + path + "'");
  out.write(kMagic, 4);
  write_u32(out, ckpt.version);
  write_u32(out, static_cast<std::uint32_t>(ckpt.model.input_dim()));
  write_u32(out, static_cast<std::uint32_t>(ckpt.model.state_dim()));
  write_u32(out, static_cast<std::uint32_t>(ckpt.model.num_classes()));
  out.put(static_cast<char>(ckpt.model.sigma));
  std::uint64_t gamma_bits;
  std::memcpy(&gamma_bits, &ckpt.model.gamma, sizeof(gamma_bits));
  write_u64(out, gamma_bits);
  write_tensor(out, ckpt.model.W);
  write_tensor(out, ckpt.model.U);
  write_tensor(out, ckpt.model.b);
  write_tensor(out, ckpt.model.V);
  write_tensor(out, ckpt.model.c);
  write_blob(out, ckpt.train_config_snapshot);
  write_blob(out, ckpt.best_validation_meta);
  if (!out) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4) throw TruncationError("checkpoint: truncated magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw BadMagicError("checkpoint: bad magic in '" + path + "'");
  }
  Checkpoint ckpt;
  ckpt.version = read_u32(in, "version");
  if (ckpt.version != kCheckpointVersion) {
    throw VersionMismatchError(
        ckpt.version, kCheckpointVersion,
        "checkpoint: version " + std::to_string(ckpt.version) + ", expected " +
            std::to_string(kCheckpointVersion));
  }
  const std::size_t input_dim = read_u32(in, "input dim");
  const std::size_t state_dim = read_u32(in, "state dim");
  const std::size_t classes = read_u32(in, "class count");
  const int sigma_tag = in.get();
  if (sigma_tag < 0) throw TruncationError("checkpoint: truncated tag");
  if (sigma_tag > 2) throw IoError("checkpoint: unknown nonlinearity tag");
  ckpt.model.sigma = static_cast<Nonlinearity>(sigma_tag);
  ckpt.model.gamma = read_f64(in, "gamma");
  ckpt.model.W = read_tensor(in, {state_dim, state_dim}, "W");
  ckpt.model.U = read_tensor(in, {state_dim, input_dim}, "U");
  ckpt.model.b = read_tensor(in, {state_dim}, "b");
  ckpt.model.V = read_tensor(in, {classes, state_dim}, "V");
  ckpt.model.c = read_tensor(in, {classes}, "c");
  ckpt.train_config_snapshot = read_blob(in, "training config");
  ckpt.best_validation_meta = read_blob(in, "validation metadata");
  ckpt.model.validate();
  return ckpt;
}

}  // namespace deqr

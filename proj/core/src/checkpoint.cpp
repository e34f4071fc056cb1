#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "kic/error.hpp"
#include "kic/hash.hpp"
#include "kic/training.hpp"

namespace kic {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'K', 'I', 'C', 'W'};
constexpr std::uint32_t kVersion = 1;

using json = nlohmann::json;

class Writer {
 public:
  template <typename V>
  void put(V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out_.append(buf, sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void str(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const noexcept { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, data_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError(source_ + ": checkpoint is truncated");
  }
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const T2TConfig& c) {
  w.put(static_cast<std::int32_t>(c.vocab_size));
  w.put(static_cast<std::int32_t>(c.d_model));
  w.put(static_cast<std::int32_t>(c.n_heads));
  w.put(static_cast<std::int32_t>(c.n_enc_layers));
  w.put(static_cast<std::int32_t>(c.n_dec_layers));
  w.put(static_cast<std::int32_t>(c.d_ff));
  w.put(static_cast<std::int32_t>(c.max_positions));
  w.put(static_cast<std::uint8_t>(c.tie_embeddings));
  w.put(c.seed);
  w.put(c.digest());
}

T2TConfig read_config(Reader& r, const std::string& source) {
  T2TConfig c;
  c.vocab_size = r.get<std::int32_t>();
  c.d_model = r.get<std::int32_t>();
  c.n_heads = r.get<std::int32_t>();
  c.n_enc_layers = r.get<std::int32_t>();
  c.n_dec_layers = r.get<std::int32_t>();
  c.d_ff = r.get<std::int32_t>();
  c.max_positions = r.get<std::int32_t>();
  c.tie_embeddings = r.get<std::uint8_t>() != 0;
  c.seed = r.get<std::uint64_t>();
  const auto digest = r.get<std::uint64_t>();
  if (digest != c.digest()) throw FormatError(source + ": config block digest does not match its fields");
  c.validate();
  return c;
}

struct Header {
  T2TConfig config;
  std::uint32_t scalar_bytes = 0;
  std::int64_t step = 0;
  std::string state_json;
};

Header read_header(Reader& r, const std::string& source) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(source + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  Header h;
  h.scalar_bytes = r.get<std::uint32_t>();
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8)
    throw FormatError(source + ": bad scalar width " + std::to_string(h.scalar_bytes));
  h.config = read_config(r, source);
  h.step = r.get<std::int64_t>();
  h.state_json = r.str();
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
void write_group(Writer& w, const KicParams<T>& p) {
  std::uint32_t count = 0;
  p.for_each([&count](std::string_view, const Matrix<T>&) { ++count; });
  w.put(count);
  p.for_each([&w](std::string_view name, const Matrix<T>& m) {
    w.str(name);
    w.put(static_cast<std::uint64_t>(m.rows()));
    w.put(static_cast<std::uint64_t>(m.cols()));
    w.bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(T));
  });
}

template <typename T>
void read_group(Reader& r, KicParams<T>& p, const std::string& source, const char* group) {
  std::uint32_t expected = 0;
  p.for_each([&expected](std::string_view, const Matrix<T>&) { ++expected; });
  const auto count = r.get<std::uint32_t>();
  if (count != expected)
    throw FormatError(source + ": " + group + " holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(expected));
  p.for_each([&](std::string_view name, Matrix<T>& m) {
    const std::string got = r.str();
    if (got != name) throw FormatError(source + ": expected tensor '" + std::string(name) + "', found '" + got + "'");
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols()))
      throw FormatError(source + ": tensor '" + got + "' has shape " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    r.bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(T));
  });
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const T2TConfig& config, const TrainState<T>& state,
                     const std::string& extra_json) {
  json st;
  st["warmup_counts"] = state.warmup_counts;
  st["task_experts"] = state.task_experts;
  st["experts_assigned"] = state.experts_assigned;
  st["extra"] = json::parse(extra_json);

  Writer w;
  w.bytes(kMagic, 4);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(sizeof(T)));
  write_config(w, config);
  w.put(state.step);
  w.str(st.dump());
  write_group(w, state.params);
  write_group(w, state.adam_m);
  write_group(w, state.adam_v);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  Reader r(data, path.string());
  const Header h = read_header(r, path.string());
  CheckpointInfo info;
  info.config = h.config;
  info.scalar_bytes = static_cast<int>(h.scalar_bytes);
  info.step = h.step;
  info.extra_json = json::parse(h.state_json).at("extra").dump();
  return info;
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const T2TConfig* expected, std::string* extra_json) {
  const std::string source = path.string();
  const std::string data = read_file(path);
  Reader r(data, source);
  const Header h = read_header(r, source);
  if (h.scalar_bytes != sizeof(T))
    throw FormatError(source + ": checkpoint stores " + std::to_string(h.scalar_bytes * 8) +
                      "-bit values, loader expects " + std::to_string(sizeof(T) * 8));
  if (expected && expected->digest() != h.config.digest())
    throw FormatError(source + ": config digest mismatch (checkpoint " + hex64(h.config.digest()) + ", expected " +
                      hex64(expected->digest()) + ")");

  TrainState<T> s;
  s.params = KicParams<T>::zeros(h.config);
  s.adam_m = KicParams<T>::zeros(h.config);
  s.adam_v = KicParams<T>::zeros(h.config);
  s.step = h.step;
  try {
    const json st = json::parse(h.state_json);
    st.at("warmup_counts").get_to(s.warmup_counts);
    st.at("task_experts").get_to(s.task_experts);
    s.experts_assigned = st.at("experts_assigned").get<bool>();
    if (extra_json) *extra_json = st.at("extra").dump();
  } catch (const json::exception& e) {
    throw FormatError(source + ": bad trainer state block: " + e.what());
  }
  read_group(r, s.params, source, "parameters");
  read_group(r, s.adam_m, source, "first moments");
  read_group(r, s.adam_v, source, "second moments");
  if (!r.done()) throw FormatError(source + ": trailing bytes after checkpoint payload");
  return s;
}

template <typename T>
std::uint64_t params_digest(const KicParams<T>& params) {
  std::uint64_t h = fnv1a64("");
  params.for_each([&h](std::string_view name, const Matrix<T>& m) {
    h = fnv1a64(name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(T)),
                h);
  });
  return h;
}

#define KIC_INSTANTIATE_CHECKPOINT(T)                                                                        \
  template void save_checkpoint<T>(const std::filesystem::path&, const T2TConfig&, const TrainState<T>&,      \
                                   const std::string&);                                                      \
  template TrainState<T> load_checkpoint<T>(const std::filesystem::path&, const T2TConfig*, std::string*);    \
  template std::uint64_t params_digest<T>(const KicParams<T>&);

KIC_INSTANTIATE_CHECKPOINT(float)
KIC_INSTANTIATE_CHECKPOINT(double)

#undef KIC_INSTANTIATE_CHECKPOINT

}  // namespace kic

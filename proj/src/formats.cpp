#include "eventdistill/formats.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "eventdistill/error.hpp"

namespace eventdistill {
namespace {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* raw = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> data) {
    bytes_.insert(bytes_.end(), data.begin(), data.end());
  }
  void put_text(const std::string& text) { bytes_.insert(bytes_.end(), text.begin(), text.end()); }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const char* what) : bytes_(bytes), what_(what) {}

  template <typename T>
  T get() {
    require(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
    offset_ += sizeof(T);
    return value;
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    require(n);
    auto out = bytes_.subspan(offset_, n);
    offset_ += n;
    return out;
  }
  void expect_magic(const char (&magic)[5]) {
    auto got = get_bytes(4);
    if (std::memcmp(got.data(), magic, 4) != 0) {
      fail(ErrorKind::format, std::string(what_) + ": bad magic, expected " + magic);
    }
  }
  std::size_t remaining() const { return bytes_.size() - offset_; }
  std::size_t offset() const { return offset_; }

 private:
  void require(std::size_t n) const {
    if (bytes_.size() - offset_ < n) {
      fail(ErrorKind::format, std::string(what_) + ": truncated at byte " +
                                  std::to_string(offset_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
  const char* what_;
};

void write_ftn(ByteWriter& out, const Tensor& tensor) {
  if (tensor.dims.size() > 255) fail(ErrorKind::parameter, "tensor rank exceeds 255");
  if (tensor.values.size() != tensor.element_count()) {
    fail(ErrorKind::dimension, "tensor payload does not match its dims");
  }
  out.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("FTN1"), 4));
  out.put<std::uint32_t>(1);
  out.put<std::uint8_t>(static_cast<std::uint8_t>(tensor.dtype));
  out.put<std::uint8_t>(static_cast<std::uint8_t>(tensor.dims.size()));
  for (std::uint32_t d : tensor.dims) out.put<std::uint32_t>(d);
  if (tensor.dtype == Dtype::f64) {
    for (double v : tensor.values) out.put<double>(v);
  } else {
    for (double v : tensor.values) out.put<float>(static_cast<float>(v));
  }
}

Tensor read_ftn(ByteReader& in) {
  in.expect_magic("FTN1");
  const auto version = in.get<std::uint32_t>();
  if (version != 1) fail(ErrorKind::format, "FTN1: unsupported version " + std::to_string(version));
  const auto dtype = in.get<std::uint8_t>();
  if (dtype != 1 && dtype != 2) fail(ErrorKind::format, "FTN1: unknown dtype " + std::to_string(dtype));
  const auto ndim = in.get<std::uint8_t>();
  Tensor tensor;
  tensor.dtype = static_cast<Dtype>(dtype);
  tensor.dims.resize(ndim);
  for (auto& d : tensor.dims) d = in.get<std::uint32_t>();
  const std::size_t count = tensor.element_count();
  const std::size_t width = tensor.dtype == Dtype::f64 ? 8 : 4;
  if (count > in.remaining() / width) fail(ErrorKind::format, "FTN1: truncated payload");
  tensor.values.resize(count);
  for (auto& v : tensor.values) {
    v = tensor.dtype == Dtype::f64 ? in.get<double>() : static_cast<double>(in.get<float>());
  }
  return tensor;
}

std::uint32_t checked_u32(int value, const char* what) {
  if (value < 0) fail(ErrorKind::parameter, std::string(what) + " must be non-negative");
  return static_cast<std::uint32_t>(value);
}

}  // namespace

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::io, "read failed for " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.dims = {1};
  t.values = {value};
  return t;
}

std::size_t Tensor::element_count() const {
  std::size_t count = 1;
  for (std::uint32_t d : dims) count *= d;
  return count;
}

Bytes encode_ftn(const Tensor& tensor) {
  ByteWriter out;
  write_ftn(out, tensor);
  return out.take();
}

Tensor decode_ftn(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, "FTN1");
  Tensor tensor = read_ftn(in);
  if (in.remaining() != 0) fail(ErrorKind::format, "FTN1: trailing bytes after payload");
  return tensor;
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  write_file(path, encode_ftn(tensor));
}

Tensor load_tensor(const std::filesystem::path& path) { return decode_ftn(read_file(path)); }

Bytes encode_evt1(const EventStream& stream) {
  ByteWriter out;
  out.put_text("EVT1");
  out.put<std::uint32_t>(1);
  out.put<std::uint32_t>(checked_u32(stream.width(), "width"));
  out.put<std::uint32_t>(checked_u32(stream.height(), "height"));
  out.put<std::uint64_t>(stream.size());
  for (const EventRecord& e : stream.events()) {
    out.put<std::uint16_t>(e.x);
    out.put<std::uint16_t>(e.y);
    out.put<std::int8_t>(e.p);
    out.put<std::uint8_t>(0);
    out.put<std::uint64_t>(e.t);
  }
  return out.take();
}

EventStream decode_evt1(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, "EVT1");
  in.expect_magic("EVT1");
  const auto version = in.get<std::uint32_t>();
  if (version != 1) fail(ErrorKind::format, "EVT1: unsupported version " + std::to_string(version));
  const auto width = in.get<std::uint32_t>();
  const auto height = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  if (width > 65536 || height > 65536) fail(ErrorKind::format, "EVT1: implausible geometry");
  if (count > in.remaining() / kEvt1RecordSize) fail(ErrorKind::format, "EVT1: truncated records");
  if (in.remaining() != count * kEvt1RecordSize) {
    fail(ErrorKind::format, "EVT1: trailing bytes after records");
  }
  std::vector<EventRecord> events(count);
  for (auto& e : events) {
    e.x = in.get<std::uint16_t>();
    e.y = in.get<std::uint16_t>();
    e.p = in.get<std::int8_t>();
    if (in.get<std::uint8_t>() != 0) fail(ErrorKind::format, "EVT1: non-zero pad byte");
    e.t = in.get<std::uint64_t>();
  }
  try {
    return EventStream(static_cast<int>(width), static_cast<int>(height), std::move(events));
  } catch (const Error& err) {
    fail(ErrorKind::format, std::string("EVT1: ") + err.what());
  }
}

std::string encode_event_csv(const EventStream& stream) {
  std::ostringstream out;
  out << "x,y,p,t\n";
  for (const EventRecord& e : stream.events()) {
    out << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << ',' << e.t << '\n';
  }
  return out.str();
}

EventStream decode_event_csv(const std::string& text, int width, int height) {
  std::istringstream in(text);
  std::string line;
  const auto next_line = [&] {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next_line() || line != "x,y,p,t") {
    fail(ErrorKind::format, "event CSV: expected header line 'x,y,p,t'");
  }
  std::vector<EventRecord> events;
  std::size_t line_no = 1;
  while (next_line()) {
    ++line_no;
    if (line.empty()) continue;
    long long x = 0, y = 0, p = 0;
    unsigned long long t = 0;
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream fields(line);
    if (!(fields >> x >> c1 >> y >> c2 >> p >> c3 >> t) || c1 != ',' || c2 != ',' || c3 != ',' ||
        x < 0 || y < 0 || x > 65535 || y > 65535) {
      fail(ErrorKind::format, "event CSV: malformed line " + std::to_string(line_no));
    }
    events.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                      static_cast<std::int8_t>(p), t});
    if (p != 1 && p != -1) fail(ErrorKind::format, "event CSV: bad polarity on line " + std::to_string(line_no));
  }
  try {
    return EventStream(width, height, std::move(events));
  } catch (const Error& err) {
    fail(ErrorKind::format, std::string("event CSV: ") + err.what());
  }
}

void save_events(const EventStream& stream, const std::filesystem::path& path) {
  if (path.extension() == ".csv") {
    const std::string text = encode_event_csv(stream);
    write_file(path, std::span<const std::uint8_t>(
                         reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } else {
    write_file(path, encode_evt1(stream));
  }
}

EventStream load_events(const std::filesystem::path& path, int csv_width, int csv_height) {
  const Bytes bytes = read_file(path);
  if (path.extension() == ".csv") {
    return decode_event_csv(std::string(bytes.begin(), bytes.end()), csv_width, csv_height);
  }
  return decode_evt1(bytes);
}

Bytes encode_netpbm(const NetpbmImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    fail(ErrorKind::parameter, "netpbm supports 1 or 3 channels");
  }
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    fail(ErrorKind::dimension, "netpbm payload does not match its shape");
  }
  ByteWriter out;
  out.put_text(std::string(image.channels == 3 ? "P6" : "P5") + "\n" +
               std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n");
  out.put_bytes(image.pixels);
  return out.take();
}

NetpbmImage decode_netpbm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto read_int = [&]() -> int {
    skip_space();
    long value = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9' && value < 1000000) {
      value = value * 10 + (bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) fail(ErrorKind::format, "netpbm: malformed header");
    return static_cast<int>(value);
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    fail(ErrorKind::format, "netpbm: bad magic, expected P5 or P6");
  }
  NetpbmImage image;
  image.channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  image.width = read_int();
  image.height = read_int();
  const int maxval = read_int();
  if (maxval != 255) fail(ErrorKind::format, "netpbm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    fail(ErrorKind::format, "netpbm: missing separator before raster");
  }
  ++pos;
  const std::size_t expected = static_cast<std::size_t>(image.width) * image.height * image.channels;
  if (bytes.size() - pos != expected) {
    fail(ErrorKind::format, "netpbm: raster size " + std::to_string(bytes.size() - pos) +
                                " does not match header (" + std::to_string(expected) + ")");
  }
  image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return image;
}

Bytes encode_ckp1(const std::vector<NamedTensor>& entries) {
  ByteWriter out;
  out.put_text("CKP1");
  out.put<std::uint32_t>(1);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& entry : entries) {
    if (entry.name.size() > 0xFFFF) fail(ErrorKind::parameter, "checkpoint entry name too long");
    out.put<std::uint16_t>(static_cast<std::uint16_t>(entry.name.size()));
    out.put_text(entry.name);
    write_ftn(out, entry.tensor);
  }
  return out.take();
}

std::vector<NamedTensor> decode_ckp1(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, "CKP1");
  in.expect_magic("CKP1");
  const auto version = in.get<std::uint32_t>();
  if (version != 1) fail(ErrorKind::format, "CKP1: unsupported version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();
  std::vector<NamedTensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint16_t>();
    const auto name = in.get_bytes(name_len);
    NamedTensor entry;
    entry.name.assign(name.begin(), name.end());
    entry.tensor = read_ftn(in);
    entries.push_back(std::move(entry));
  }
  if (in.remaining() != 0) fail(ErrorKind::format, "CKP1: trailing bytes after last entry");
  return entries;
}

}  // namespace eventdistill

#include "capslid/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace capslid {

namespace {

constexpr std::uint16_t kFormatPcm = 0x0001;

std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

bool fourcc(const std::uint8_t* p, const char* id) {
  return std::memcmp(p, id, 4) == 0;
}

}  // namespace

PcmSignal decode_wav(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || !fourcc(bytes.data(), "RIFF") ||
      !fourcc(bytes.data() + 8, "WAVE"))
    throw Error(ErrorKind::MalformedWav, "missing RIFF/WAVE header");

  // Walk chunks; we need one fmt chunk followed by one data chunk.
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* hdr = bytes.data() + pos;
    std::uint32_t size = read_u32(hdr + 4);
    std::size_t body = pos + 8;
    if (body + size > bytes.size())
      throw Error(ErrorKind::MalformedWav, "chunk extends past end of file");

    if (fourcc(hdr, "fmt ")) {
      if (size < 16) throw Error(ErrorKind::MalformedWav, "fmt chunk too small");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (fourcc(hdr, "data")) {
      if (!have_fmt)
        throw Error(ErrorKind::MalformedWav, "data chunk before fmt chunk");
      if (format != kFormatPcm || bits != 16)
        throw Error(ErrorKind::UnsupportedFormat,
                    "only PCM 16-bit is supported (format tag " +
                        std::to_string(format) + ", " + std::to_string(bits) +
                        " bits)");
      if (channels != 1)
        throw Error(ErrorKind::UnsupportedFormat,
                    std::to_string(channels) + "-channel audio is not supported");
      if (rate == 0) throw Error(ErrorKind::MalformedWav, "zero sample rate");
      if (size < 2) throw Error(ErrorKind::MalformedWav, "empty data chunk");

      std::size_t n = size / 2;
      PcmSignal signal;
      signal.sample_rate_hz = static_cast<int>(rate);
      signal.samples.resize(n);
      const std::uint8_t* d = bytes.data() + body;
      for (std::size_t i = 0; i < n; ++i) {
        auto s = static_cast<std::int16_t>(read_u16(d + 2 * i));
        signal.samples[i] = s / 32768.0;
      }
      return signal;
    }
    pos = body + size + (size & 1);  // chunks are 2-byte aligned
  }
  throw Error(ErrorKind::MalformedWav,
              have_fmt ? "no data chunk" : "truncated header");
}

std::vector<std::uint8_t> encode_wav(const PcmSignal& signal) {
  if (signal.sample_rate_hz <= 0)
    throw Error(ErrorKind::UnsupportedFormat, "sample rate must be positive");
  const std::uint32_t n = static_cast<std::uint32_t>(signal.samples.size());
  const std::uint32_t data_size = n * 2;
  const std::uint32_t rate = static_cast<std::uint32_t>(signal.sample_rate_hz);

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_size);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_size);
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);  // mono
  put_u32(out, rate);
  put_u32(out, rate * 2);  // byte rate
  put_u16(out, 2);         // block align
  put_u16(out, 16);        // bits per sample
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_size);
  for (double x : signal.samples) {
    double clamped = std::clamp(x, -1.0, 1.0);
    long q = std::lround(clamped * 32768.0);
    q = std::clamp(q, -32768L, 32767L);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

PcmSignal read_wav_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::IoError, "read failed: " + path.string());
  return decode_wav(bytes);
}

void write_wav_file(const std::filesystem::path& path, const PcmSignal& signal) {
  auto bytes = encode_wav(signal);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed: " + path.string());
}

}  // namespace capslid

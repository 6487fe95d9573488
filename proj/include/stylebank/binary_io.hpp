#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "stylebank/error.hpp"

namespace stylebank {

static_assert(std::endian::native == std::endian::little,
              "binary containers are written with host byte order; big-endian hosts need byteswaps");

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }

  void put_magic(const char (&magic)[5]) { put_bytes(magic, 4); }

  void put_floats(std::span<const float> v) { put_bytes(v.data(), v.size_bytes()); }

  std::vector<std::uint8_t>& bytes() noexcept { return bytes_; }
  std::size_t size() const noexcept { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian cursor over a byte span.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, std::string context = {})
      : bytes_(bytes), context_(std::move(context)) {}

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    require(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void get_bytes(void* out, std::size_t n) {
    require(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool magic_is(const char (&magic)[5]) {
    require(4);
    const bool ok = std::memcmp(bytes_.data() + pos_, magic, 4) == 0;
    pos_ += 4;
    return ok;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(FormatErrc::truncated, context_ + " ends at byte " + std::to_string(bytes_.size()));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

/// Owning POSIX file descriptor.
///
/// Reads go through pread, so one File can serve concurrent readers.
class File {
 public:
  File() = default;
  File(const File&) = delete;
  File& operator=(const File&) = delete;
  File(File&& other) noexcept
      : fd_(std::exchange(other.fd_, -1)), path_(std::move(other.path_)), bytes_read_(other.bytes_read_.load()) {}
  File& operator=(File&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = std::exchange(other.fd_, -1);
      path_ = std::move(other.path_);
      bytes_read_ = other.bytes_read_.load();
    }
    return *this;
  }
  ~File() { close(); }

  static File open_read(const std::filesystem::path& path) {
    File f;
    f.path_ = path.string();
    f.fd_ = ::open(f.path_.c_str(), O_RDONLY | O_CLOEXEC);
    if (f.fd_ < 0) f.fail("open");
    return f;
  }

  static File create(const std::filesystem::path& path) {
    File f;
    f.path_ = path.string();
    f.fd_ = ::open(f.path_.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (f.fd_ < 0) f.fail("create");
    return f;
  }

  std::uint64_t size() const {
    struct stat st {};
    if (::fstat(fd_, &st) != 0) fail("stat");
    return static_cast<std::uint64_t>(st.st_size);
  }

  /// Reads exactly out.size() bytes at `offset`; short reads are errors.
  void pread_exact(std::span<std::uint8_t> out, std::uint64_t offset) const {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        fail("read");
      }
      if (n == 0) {
        throw FormatError(FormatErrc::truncated,
                          path_ + ": unexpected end of file at byte " + std::to_string(offset + done));
      }
      done += static_cast<std::size_t>(n);
    }
    bytes_read_.fetch_add(out.size(), std::memory_order_relaxed);
  }

  void write_all(std::span<const std::uint8_t> bytes) {
    std::size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t n = ::write(fd_, bytes.data() + done, bytes.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail("write");
      }
      done += static_cast<std::size_t>(n);
    }
  }

  void sync() {
    if (::fsync(fd_) != 0) fail("fsync");
  }

  /// Total bytes delivered by pread_exact since the file was opened.
  std::uint64_t bytes_read() const noexcept { return bytes_read_.load(std::memory_order_relaxed); }
  const std::string& path() const noexcept { return path_; }

 private:
  [[noreturn]] void fail(const char* what) const {
    throw FormatError(FormatErrc::io, path_ + ": " + what + " failed: " + std::strerror(errno));
  }

  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  int fd_ = -1;
  std::string path_;
  mutable std::atomic<std::uint64_t> bytes_read_{0};
};

/// Writes `bytes` to `path` and fsyncs before returning.
inline void write_file_synced(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  File f = File::create(path);
  f.write_all(bytes);
  f.sync();
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  File f = File::open_read(path);
  std::vector<std::uint8_t> bytes(f.size());
  if (!bytes.empty()) f.pread_exact(bytes, 0);
  return bytes;
}

}  // namespace stylebank

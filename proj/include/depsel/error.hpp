#pragma once

#include <stdexcept>
#include <string>

namespace depsel {

// Exit-code classes of the command-line surface.
enum class ErrorClass { user = 1, backend = 2 };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }
  int exit_code() const noexcept { return static_cast<int>(cls_); }

 private:
  ErrorClass cls_;
};

// Bad input, bad config, violated preconditions.
class UserError : public Error {
 public:
  explicit UserError(const std::string& what) : Error(ErrorClass::user, what) {}
};

// Transport failures and in-band backend errors.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable = false)
      : Error(ErrorClass::backend, what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

}  // namespace depsel

#pragma once

#include <stdexcept>
#include <string>

namespace spd {

/// Base of every error raised by the library. The CLI prints what() as its
/// one-line diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SPD_DEFINE_ERROR(Name)            \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

SPD_DEFINE_ERROR(AlignmentError);
SPD_DEFINE_ERROR(DegenerateRow);
SPD_DEFINE_ERROR(ShapeMismatch);
SPD_DEFINE_ERROR(EmptySelection);
SPD_DEFINE_ERROR(OverlapError);
SPD_DEFINE_ERROR(RecordMismatch);
SPD_DEFINE_ERROR(BackendFailure);
SPD_DEFINE_ERROR(InvalidAssignment);
SPD_DEFINE_ERROR(MalformedResponse);
SPD_DEFINE_ERROR(MissingRecord);
SPD_DEFINE_ERROR(FormatError);
SPD_DEFINE_ERROR(ConfigError);

#undef SPD_DEFINE_ERROR

/// Prompt does not match a template grammar. position is the character
/// offset of the first token that failed to parse.
class TemplateMismatch : public Error {
 public:
  TemplateMismatch(const std::string& what, std::size_t position)
      : Error(what + " (at char " + std::to_string(position) + ")"), position_(position) {}

  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

}  // namespace spd

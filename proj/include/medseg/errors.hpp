#pragma once

#include <stdexcept>
#include <string>

namespace medseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

#define MEDSEG_DEFINE_ERROR(Name)                                                  \
    class Name : public Error {                                                    \
      public:                                                                      \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}      \
    }

MEDSEG_DEFINE_ERROR(MalformedMarkup);
MEDSEG_DEFINE_ERROR(ShapeError);
MEDSEG_DEFINE_ERROR(InvalidArgument);
MEDSEG_DEFINE_ERROR(IdOutOfRange);
MEDSEG_DEFINE_ERROR(LayoutInfeasible);
MEDSEG_DEFINE_ERROR(UnknownStyle);
MEDSEG_DEFINE_ERROR(SequenceTooLong);
MEDSEG_DEFINE_ERROR(GenerationBudgetExceeded);
MEDSEG_DEFINE_ERROR(NonFiniteLoss);
MEDSEG_DEFINE_ERROR(EmptyEvalSet);
MEDSEG_DEFINE_ERROR(IoError);
MEDSEG_DEFINE_ERROR(FormatError);
MEDSEG_DEFINE_ERROR(AnnotatorUnavailable);
MEDSEG_DEFINE_ERROR(ReviewerUnavailable);
MEDSEG_DEFINE_ERROR(CorruptState);

#undef MEDSEG_DEFINE_ERROR

} // namespace medseg

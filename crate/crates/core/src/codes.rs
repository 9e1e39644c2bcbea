use std::fmt;

use serde::{Serialize, Serializer};

/// Stable machine-readable error codes shared by the parser, validator,
/// executor, scorer and numeric modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Code {
    Parse,
    MissingField,
    FieldType,
    UnknownOp,
    FirstNotSelect,
    EmptyChain,
    ChainTooLong,
    EmptyRegion,
    ArgSchema,
    Order,
    RegionUnresolved,
    EmptySelection,
    NoSelection,
    NoWorking,
    FieldMissing,
    NotNumeric,
    MissingReference,
    Overflow,
    NoAnswer,
    ProbRange,
    ProbCount,
    ShapeMismatch,
    NonFinite,
    GroupTooSmall,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::Parse => "E_PARSE",
            Code::MissingField => "E_MISSING_FIELD",
            Code::FieldType => "E_FIELD_TYPE",
            Code::UnknownOp => "E_UNKNOWN_OP",
            Code::FirstNotSelect => "E_FIRST_NOT_SELECT",
            Code::EmptyChain => "E_EMPTY_CHAIN",
            Code::ChainTooLong => "E_CHAIN_TOO_LONG",
            Code::EmptyRegion => "E_EMPTY_REGION",
            Code::ArgSchema => "E_ARG_SCHEMA",
            Code::Order => "E_ORDER",
            Code::RegionUnresolved => "E_REGION_UNRESOLVED",
            Code::EmptySelection => "E_EMPTY_SELECTION",
            Code::NoSelection => "E_NO_SELECTION",
            Code::NoWorking => "E_NO_WORKING",
            Code::FieldMissing => "E_FIELD_MISSING",
            Code::NotNumeric => "E_NOT_NUMERIC",
            Code::MissingReference => "E_MISSING_REFERENCE",
            Code::Overflow => "E_OVERFLOW",
            Code::NoAnswer => "E_NO_ANSWER",
            Code::ProbRange => "E_PROB_RANGE",
            Code::ProbCount => "E_PROB_COUNT",
            Code::ShapeMismatch => "E_SHAPE_MISMATCH",
            Code::NonFinite => "E_NONFINITE",
            Code::GroupTooSmall => "E_GROUP_TOO_SMALL",
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Code {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

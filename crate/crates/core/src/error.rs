//! Stable error classes shared by every module.
//!
//! Each module has its own error enum; all of them map onto an [`ErrorCode`]
//! so that the CLI can report a stable process exit code and scenario files
//! can name expected failures.

use std::fmt;
use std::str::FromStr;

macro_rules! error_codes {
    ($($variant:ident = $code:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum ErrorCode {
            $($variant,)*
        }

        impl ErrorCode {
            pub const ALL: &'static [ErrorCode] = &[$(ErrorCode::$variant,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(ErrorCode::$variant => stringify!($variant),)*
                }
            }

            /// Process exit code used by the command-line front end.
            pub fn exit_code(self) -> i32 {
                match self {
                    $(ErrorCode::$variant => $code,)*
                }
            }
        }
    };
}

error_codes! {
    Internal = 1,
    Usage = 2,
    Io = 3,
    Malformed = 4,
    PolicyNotSatisfied = 10,
    ShareCorrupt = 11,
    EnvelopeCorrupt = 12,
    AuthenticationFailure = 13,
    MalformedPolicy = 14,
    ParseError = 15,
    UnknownAttribute = 16,
    EmptyUniverse = 17,
    EmptyAttributeSet = 18,
    CidMismatch = 19,
    VersionGap = 20,
    BadSignature = 21,
    NotFound = 22,
    IntegrityViolation = 23,
    StorageFull = 24,
    EmptyObject = 25,
    DuplicateDid = 26,
    DuplicateRecordAnchor = 27,
    UnknownSignerDid = 28,
    UnknownDid = 29,
    UnknownCid = 30,
    EmptyClaims = 31,
    CredentialInvalid = 32,
    ChallengeFailed = 33,
    ProtocolViolation = 34,
    AttributeNotInPolicy = 35,
    ChannelNotAuthenticated = 36,
    EmptyRecord = 37,
    DirectoryNotEmpty = 40,
    UnknownActor = 41,
    UnknownRequest = 42,
    ScenarioDiverged = 43,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCode::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error code `{s}`"))
    }
}

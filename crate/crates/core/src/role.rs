use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The three parties of a session. `HolderA` always owns the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleId {
    HolderA,
    HolderB,
    Server,
}

impl RoleId {
    pub const ALL: [RoleId; 3] = [RoleId::HolderA, RoleId::HolderB, RoleId::Server];

    pub fn code(self) -> u8 {
        match self {
            RoleId::HolderA => 0,
            RoleId::HolderB => 1,
            RoleId::Server => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<RoleId> {
        RoleId::ALL.get(code as usize).copied()
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RoleId::HolderA => "holder-a",
            RoleId::HolderB => "holder-b",
            RoleId::Server => "server",
        }
    }

    pub fn is_holder(self) -> bool {
        !matches!(self, RoleId::Server)
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "holder-a" | "a" | "holdera" => Ok(RoleId::HolderA),
            "holder-b" | "b" | "holderb" => Ok(RoleId::HolderB),
            "server" | "s" => Ok(RoleId::Server),
            other => Err(Error::Config(format!("unknown role `{other}`"))),
        }
    }
}

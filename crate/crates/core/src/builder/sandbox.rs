use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::derivation::Derivation;

/// What a build may observe beyond its declared inputs.
///
/// Version 1 still leaks a little host information (a simulated kernel
/// version and OS name); version 2 exposes nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxPolicy {
    pub version: u8,
    pub exposed_host_info: BTreeMap<String, String>,
    pub allowed_env_passthrough: BTreeSet<String>,
}

pub const V1_KERNEL_VERSION: &str = "4.9.0";
pub const V1_OS_NAME: &str = "NixOS 17.09";

impl SandboxPolicy {
    pub fn v1() -> Self {
        SandboxPolicy {
            version: 1,
            exposed_host_info: BTreeMap::from([
                ("KERNEL_VERSION".to_string(), V1_KERNEL_VERSION.to_string()),
                ("OS_NAME".to_string(), V1_OS_NAME.to_string()),
            ]),
            allowed_env_passthrough: BTreeSet::new(),
        }
    }

    pub fn v2() -> Self {
        SandboxPolicy {
            version: 2,
            exposed_host_info: BTreeMap::new(),
            allowed_env_passthrough: BTreeSet::new(),
        }
    }

    pub fn network_allowed(&self, drv: &Derivation) -> bool {
        drv.fixed_output.is_some()
    }

    /// Variables only the v1 sandbox exposes.
    pub fn v1_only_vars() -> BTreeSet<String> {
        let v2 = Self::v2().exposed_host_info;
        Self::v1()
            .exposed_host_info
            .into_keys()
            .filter(|k| !v2.contains_key(k))
            .collect()
    }
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        Self::v2()
    }
}

impl fmt::Display for SandboxPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.version)
    }
}

impl FromStr for SandboxPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "v1" | "1" => Ok(Self::v1()),
            "v2" | "2" => Ok(Self::v2()),
            _ => Err(format!("unknown sandbox version `{s}` (expected v1 or v2)")),
        }
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Fixed 8-byte device identifier assigned at provisioning.
///
/// Ordering is numeric, which coincides with lexicographic order of the
/// big-endian encoding. This order fixes the sign convention of the
/// pairwise masks and the layout of the sealed secret set.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u64);

impl DeviceId {
    /// Reserved for the aggregation server.
    pub const SERVER: DeviceId = DeviceId(0);

    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(b: [u8; 8]) -> Self {
        DeviceId(u64::from_be_bytes(b))
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({:016x})", self.0)
    }
}

impl FromStr for DeviceId {
    type Err = String;

    /// Parses up to 16 hex digits.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim_start_matches("0x");
        if s.is_empty() || s.len() > 16 {
            return Err(format!("device id `{s}` must be 1-16 hex digits"));
        }
        u64::from_str_radix(s, 16)
            .map(DeviceId)
            .map_err(|e| format!("device id `{s}`: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matches_byte_order() {
        let a = DeviceId(0x00ff);
        let b = DeviceId(0x0100);
        assert!(a < b);
        assert!(a.to_bytes() < b.to_bytes());
    }

    #[test]
    fn parse_and_display() {
        let id: DeviceId = "00000000000000a1".parse().unwrap();
        assert_eq!(id, DeviceId(0xa1));
        assert_eq!(id.to_string(), "00000000000000a1");
        assert_eq!("0x1f".parse::<DeviceId>().unwrap(), DeviceId(0x1f));
        assert!("".parse::<DeviceId>().is_err());
        assert!("zz".parse::<DeviceId>().is_err());
        assert!("11112222333344445".parse::<DeviceId>().is_err());
    }
}

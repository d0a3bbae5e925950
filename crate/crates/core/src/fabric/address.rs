use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FabricError;

pub const MIN_PORT: u16 = 1024;

/// An `ip:port` binding. Ports below 1024 are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerAddress {
    ip: Ipv4Addr,
    port: u16,
}

impl PeerAddress {
    pub fn new(ip: Ipv4Addr, port: u16) -> Result<Self, FabricError> {
        if port < MIN_PORT {
            return Err(FabricError::Config(format!(
                "port {port} is outside [{MIN_PORT}, 65535]"
            )));
        }
        Ok(PeerAddress { ip, port })
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.ip
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn to_socket_addr(self) -> SocketAddr {
        SocketAddr::V4(SocketAddrV4::new(self.ip, self.port))
    }

    pub fn to_bytes(self) -> [u8; 6] {
        let mut b = [0u8; 6];
        b[..4].copy_from_slice(&self.ip.octets());
        b[4..].copy_from_slice(&self.port.to_be_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; 6]) -> Result<Self, FabricError> {
        Self::new(
            Ipv4Addr::new(b[0], b[1], b[2], b[3]),
            u16::from_be_bytes([b[4], b[5]]),
        )
    }
}

impl fmt::Display for PeerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

impl FromStr for PeerAddress {
    type Err = FabricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let sa: SocketAddrV4 = s
            .parse()
            .map_err(|_| FabricError::Config(format!("'{s}' is not an ipv4:port address")))?;
        Self::new(*sa.ip(), sa.port())
    }
}

impl Serialize for PeerAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PeerAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Candidate addresses for rotation, `IP_avail × P_avail`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressPool {
    pub ips: Vec<Ipv4Addr>,
    /// Inclusive port range.
    pub ports: (u16, u16),
}

impl AddressPool {
    pub fn new(ips: Vec<Ipv4Addr>, first_port: u16, last_port: u16) -> Result<Self, FabricError> {
        let pool = AddressPool {
            ips,
            ports: (first_port, last_port),
        };
        pool.validate()?;
        Ok(pool)
    }

    /// `count` consecutive addresses starting at `first`.
    pub fn ip_range(first: Ipv4Addr, count: u32) -> Vec<Ipv4Addr> {
        let base = u32::from(first);
        (0..count).map(|i| Ipv4Addr::from(base + i)).collect()
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        if self.ips.is_empty() {
            return Err(FabricError::Config("address pool has no IPs".into()));
        }
        let (lo, hi) = self.ports;
        if lo < MIN_PORT || lo > hi {
            return Err(FabricError::Config(format!(
                "invalid port range {lo}..={hi}"
            )));
        }
        Ok(())
    }

    pub fn port_count(&self) -> usize {
        (self.ports.1 - self.ports.0) as usize + 1
    }

    pub fn len(&self) -> usize {
        self.ips.len() * self.port_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th element of the pool product, IP-major.
    pub fn nth(&self, i: usize) -> PeerAddress {
        let ports = self.port_count();
        PeerAddress {
            ip: self.ips[i / ports],
            port: self.ports.0 + (i % ports) as u16,
        }
    }

    pub fn contains(&self, addr: &PeerAddress) -> bool {
        self.ips.contains(&addr.ip) && (self.ports.0..=self.ports.1).contains(&addr.port)
    }
}

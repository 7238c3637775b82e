//! DRBD-style mirrored block device.
//!
//! A [`Device`] is the pair of replicas of one resource (`r0`). Writes are
//! mirrored under protocol A, B or C; lost connections are detected by
//! ping/request timeouts; reconnection runs a generation-tag handshake that
//! either finds the sides in sync, starts a rate-limited resync, or declares
//! split-brain and applies the after-sb policy.

mod bitmap;
mod conf;
mod device;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::NodeId;
use crate::time::SimTime;

pub use bitmap::{ActivityLog, DirtyBitmap};
pub use conf::{parse_drbd_conf, DrbdConfError};
pub use device::{
    classify_handshake, BlockIo, BlockMsg, BlockTimer, DevEvent, Device, HandshakeResult, RoleError, Side, WriteError,
};

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    A,
    B,
    C,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Protocol::A => "A",
            Protocol::B => "B",
            Protocol::C => "C",
        };
        f.write_str(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoErrorPolicy {
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfterSbPolicy {
    Disconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbAction {
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerAddress {
    pub node: NodeId,
    pub address: Option<String>,
    pub device: Option<String>,
    pub disk: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceConfig {
    pub name: String,
    pub protocol: Protocol,
    /// Resync ceiling in bytes per second.
    pub sync_rate: u64,
    pub al_extents: u32,
    pub on_io_error: IoErrorPolicy,
    pub allow_two_primaries: bool,
    /// Indexed by the number of primaries at split-brain detection.
    pub after_sb: [AfterSbPolicy; 3],
    pub block_size: u64,
    pub block_count: u32,
    pub hosts: Vec<PeerAddress>,
    /// Handler script lines, recorded and never executed.
    pub handlers: Vec<String>,
    pub local_write_latency: SimTime,
    pub ping_int: SimTime,
    pub ping_timeout: SimTime,
    pub request_timeout: SimTime,
    pub connect_int: SimTime,
    pub resync_tick: SimTime,
    /// How long a booting node waits for its peer before promoting alone.
    pub degr_wfc_timeout: SimTime,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            name: "r0".into(),
            protocol: Protocol::C,
            sync_rate: 10 * MIB,
            al_extents: 257,
            on_io_error: IoErrorPolicy::Detach,
            allow_two_primaries: false,
            after_sb: [AfterSbPolicy::Disconnect; 3],
            block_size: 4 * KIB,
            block_count: 65_536,
            hosts: Vec::new(),
            handlers: Vec::new(),
            local_write_latency: SimTime::ZERO,
            ping_int: SimTime::from_secs(10),
            ping_timeout: SimTime(500),
            request_timeout: SimTime::from_secs(6),
            connect_int: SimTime::from_secs(10),
            resync_tick: SimTime(100),
            degr_wfc_timeout: SimTime::from_secs(60),
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.al_extents < 7 {
            return Err(format!("al-extents {} below minimum 7", self.al_extents));
        }
        if self.sync_rate == 0 {
            return Err("sync rate must be positive".into());
        }
        if self.block_count == 0 || self.block_size == 0 {
            return Err("device must have at least one block".into());
        }
        Ok(())
    }

    /// DRBD activity-log extents cover 4 MiB each.
    pub fn blocks_per_extent(&self) -> u32 {
        ((4 * MIB) / self.block_size).max(1) as u32
    }

    pub fn node_names(&self) -> Vec<NodeId> {
        self.hosts.iter().map(|h| h.node.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnState {
    StandAlone,
    WFConnection,
    Connected,
    SyncSource,
    SyncTarget,
}

impl ConnState {
    pub fn is_connected(self) -> bool {
        matches!(self, ConnState::Connected | ConnState::SyncSource | ConnState::SyncTarget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiskState {
    UpToDate,
    Consistent,
    Outdated,
    Inconsistent,
    Detached,
}

macro_rules! debug_display {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Debug::fmt(self, f)
            }
        }
    )*};
}
debug_display!(Role, ConnState, DiskState);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WriteId(pub u64);

impl fmt::Display for WriteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// Last-writer record of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRecord {
    pub write_id: WriteId,
    /// Index of the issuing node within the device's host list.
    pub writer: u8,
    pub digest: u64,
}

impl BlockRecord {
    pub fn new(write_id: WriteId, writer: u8, block: u32) -> Self {
        BlockRecord { write_id, writer, digest: digest(write_id.0, block) }
    }
}

fn digest(write: u64, block: u32) -> u64 {
    // splitmix64 over the pair
    let mut z = write.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(block).rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sparse array of `block_count` blocks; absent entries are the initial
/// all-zero contents shared by both replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockStore {
    block_count: u32,
    blocks: std::collections::BTreeMap<u32, BlockRecord>,
}

impl BlockStore {
    pub fn new(block_count: u32) -> Self {
        BlockStore { block_count, blocks: Default::default() }
    }

    pub fn len(&self) -> u32 {
        self.block_count
    }

    pub fn is_empty(&self) -> bool {
        self.block_count == 0
    }

    pub fn get(&self, block: u32) -> Option<&BlockRecord> {
        self.blocks.get(&block)
    }

    pub(crate) fn put(&mut self, block: u32, rec: Option<BlockRecord>) {
        assert!(block < self.block_count, "block {block} out of range");
        match rec {
            Some(r) => {
                self.blocks.insert(block, r);
            }
            None => {
                self.blocks.remove(&block);
            }
        }
    }

    pub fn written(&self) -> impl Iterator<Item = (u32, &BlockRecord)> {
        self.blocks.iter().map(|(b, r)| (*b, r))
    }

    /// Blocks whose contents differ between the two stores.
    pub fn diff(&self, other: &BlockStore) -> Vec<u32> {
        let mut keys: Vec<u32> = self.blocks.keys().chain(other.blocks.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter().filter(|b| self.blocks.get(b) != other.blocks.get(b)).collect()
    }

    pub fn contains_write(&self, block: u32, write: WriteId) -> bool {
        self.blocks.get(&block).is_some_and(|r| r.write_id == write)
    }
}

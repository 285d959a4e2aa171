//! Backing store with reproducible content, and the integrity oracle.
//!
//! Block `b` holds a keyed-hash stream of `(seed, b)`: word `j` of the block
//! is `mix(key(seed, b) + j * GOLDEN)`. Any reader can regenerate a block
//! without touching the store.

use std::sync::Arc;

use thiserror::Error;

use crate::memory::{Addr, MemoryMap, Region};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("block {block} outside capacity {capacity}")]
    OutOfRange { block: u64, capacity: u64 },
    #[error("block size {0} is not a positive multiple of 8")]
    BadBlockSize(u32),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("read buffer differs from the pattern at byte {offset}")]
pub struct Mismatch {
    pub offset: usize,
}

/// splitmix64 finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn block_key(seed: u64, block: u64) -> u64 {
    mix(seed ^ mix(block.wrapping_add(GOLDEN)))
}

/// Word `j` of block `block`.
#[inline]
pub fn pattern_word(seed: u64, block: u64, j: u64) -> u64 {
    mix(block_key(seed, block).wrapping_add(j.wrapping_mul(GOLDEN)))
}

pub fn fill_block(seed: u64, block: u64, out: &mut [u8]) {
    let key = block_key(seed, block);
    for (j, chunk) in out.chunks_exact_mut(8).enumerate() {
        let w = mix(key.wrapping_add((j as u64).wrapping_mul(GOLDEN)));
        chunk.copy_from_slice(&w.to_le_bytes());
    }
}

/// Bytes of one block, without reference to any store instance.
pub fn read_block_oracle(seed: u64, block: u64, block_bytes: u32, capacity: u64) -> Result<Vec<u8>, StoreError> {
    if block >= capacity {
        return Err(StoreError::OutOfRange { block, capacity });
    }
    let mut out = vec![0u8; block_bytes as usize];
    fill_block(seed, block, &mut out);
    Ok(out)
}

/// Checks `buffer` against blocks `slba ..= slba + nlb`.
pub fn verify_read(buffer: &[u8], slba: u64, nlb: u16, seed: u64, block_bytes: u32) -> Result<(), Mismatch> {
    let bs = block_bytes as usize;
    let want_len = (nlb as usize + 1) * bs;
    if buffer.len() < want_len {
        return Err(Mismatch { offset: buffer.len() });
    }
    for i in 0..=nlb as usize {
        let key = block_key(seed, slba + i as u64);
        let block = &buffer[i * bs..(i + 1) * bs];
        for (j, chunk) in block.chunks_exact(8).enumerate() {
            let w = mix(key.wrapping_add((j as u64).wrapping_mul(GOLDEN)));
            let got = u64::from_le_bytes(chunk.try_into().unwrap());
            if got != w {
                let byte = w.to_le_bytes().iter().zip(chunk).position(|(a, b)| a != b).unwrap();
                return Err(Mismatch {
                    offset: i * bs + j * 8 + byte,
                });
            }
        }
    }
    Ok(())
}

/// The emulated block address space, resident in one registered region.
#[derive(Debug, Clone)]
pub struct BackingStore {
    region: Arc<Region>,
    seed: u64,
    block_bytes: u32,
    capacity_blocks: u64,
}

impl BackingStore {
    pub fn new(memory: &MemoryMap, capacity_blocks: u64, block_bytes: u32, seed: u64) -> Result<Self, StoreError> {
        if block_bytes == 0 || block_bytes % 8 != 0 {
            return Err(StoreError::BadBlockSize(block_bytes));
        }
        let region = memory.register((capacity_blocks * block_bytes as u64) as usize);
        // Fill in 1 MiB strips to keep the staging buffer small.
        let per_strip = ((1 << 20) / block_bytes as u64).max(1);
        let mut strip = vec![0u8; (per_strip * block_bytes as u64) as usize];
        let mut b = 0;
        while b < capacity_blocks {
            let n = per_strip.min(capacity_blocks - b);
            for (i, blk) in strip.chunks_exact_mut(block_bytes as usize).take(n as usize).enumerate() {
                fill_block(seed, b + i as u64, blk);
            }
            region
                .write(b * block_bytes as u64, &strip[..(n * block_bytes as u64) as usize])
                .expect("store region sized for capacity");
            b += n;
        }
        Ok(Self {
            region,
            seed,
            block_bytes,
            capacity_blocks,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_bytes(&self) -> u32 {
        self.block_bytes
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_blocks
    }

    pub fn region(&self) -> &Arc<Region> {
        &self.region
    }

    pub fn addr_of(&self, block: u64) -> Addr {
        self.region.addr(block * self.block_bytes as u64)
    }

    pub fn read_block(&self, block: u64) -> Result<Vec<u8>, StoreError> {
        if block >= self.capacity_blocks {
            return Err(StoreError::OutOfRange {
                block,
                capacity: self.capacity_blocks,
            });
        }
        let mut out = vec![0u8; self.block_bytes as usize];
        self.region
            .read(block * self.block_bytes as u64, &mut out)
            .expect("block in range");
        Ok(out)
    }
}

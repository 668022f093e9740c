//! Physical address bit layout. Bank-select bits sit directly above the
//! column byte offset, so consecutive column-sized chunks land in consecutive banks.

use serde::{Deserialize, Serialize};

use crate::config::PimConfig;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Offset,
    Bank,
    Channel,
    Column,
    Row,
    Hbm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhysAddr {
    pub hbm: u64,
    pub channel: u64,
    pub bank: u64,
    pub row: u64,
    pub column: u64,
    pub offset: u64,
}

impl PhysAddr {
    fn get(&self, f: Field) -> u64 {
        match f {
            Field::Offset => self.offset,
            Field::Bank => self.bank,
            Field::Channel => self.channel,
            Field::Column => self.column,
            Field::Row => self.row,
            Field::Hbm => self.hbm,
        }
    }

    fn set(&mut self, f: Field, v: u64) {
        match f {
            Field::Offset => self.offset = v,
            Field::Bank => self.bank = v,
            Field::Channel => self.channel = v,
            Field::Column => self.column = v,
            Field::Row => self.row = v,
            Field::Hbm => self.hbm = v,
        }
    }
}

/// Fields from least to most significant, each with a bit width and the number
/// of valid values (which may be less than `2^bits`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressMap {
    fields: Vec<(Field, u32, u64)>,
}

fn bits_for(count: u64) -> u32 {
    if count <= 1 {
        0
    } else {
        u64::BITS - (count - 1).leading_zeros()
    }
}

impl AddressMap {
    /// `order` lists the fields above the byte offset, least significant first.
    /// The first must be `Bank`.
    pub fn with_order(hw: &PimConfig, order: &[Field]) -> Result<Self> {
        let mut all = vec![Field::Offset];
        all.extend_from_slice(order);
        let mut sorted = all.clone();
        sorted.sort_by_key(|f| *f as u8);
        sorted.dedup();
        if sorted.len() != 6 || all.len() != 6 {
            return Err(SimError::Config(format!("address order {order:?} must name each field once")));
        }
        if order.first() != Some(&Field::Bank) {
            return Err(SimError::Config("bank bits must be the lowest above the byte offset".into()));
        }
        let count = |f: Field| -> u64 {
            match f {
                Field::Offset => hw.column_bytes as u64,
                Field::Bank => hw.banks_per_channel as u64,
                Field::Channel => hw.channels_per_hbm as u64,
                Field::Column => hw.columns_per_row() as u64,
                Field::Row => hw.rows_per_bank as u64,
                Field::Hbm => hw.n_hbms as u64,
            }
        };
        let fields: Vec<(Field, u32, u64)> = all.into_iter().map(|f| (f, bits_for(count(f)), count(f))).collect();
        if fields.iter().map(|f| f.1).sum::<u32>() > 64 {
            return Err(SimError::Config("address does not fit 64 bits".into()));
        }
        Ok(Self { fields })
    }

    /// Offset | bank | channel | column | row | hbm.
    pub fn new(hw: &PimConfig) -> Result<Self> {
        Self::with_order(hw, &[Field::Bank, Field::Channel, Field::Column, Field::Row, Field::Hbm])
    }

    pub fn fields(&self) -> &[(Field, u32, u64)] {
        &self.fields
    }

    pub fn address_bits(&self) -> u32 {
        self.fields.iter().map(|f| f.1).sum()
    }

    /// Lowest bit position of `field`.
    pub fn shift(&self, field: Field) -> u32 {
        self.fields.iter().take_while(|f| f.0 != field).map(|f| f.1).sum()
    }

    pub fn encode(&self, a: &PhysAddr) -> Result<u64> {
        let mut addr = 0u64;
        let mut shift = 0;
        for &(f, bits, count) in &self.fields {
            let v = a.get(f);
            if v >= count {
                return Err(SimError::Config(format!("{f:?} value {v} out of range 0..{count}")));
            }
            addr |= v.checked_shl(shift).unwrap_or(0);
            shift += bits;
        }
        Ok(addr)
    }

    pub fn decode(&self, addr: u64) -> Result<PhysAddr> {
        let mut a = PhysAddr::default();
        let mut shift = 0;
        for &(f, bits, count) in &self.fields {
            let mask = if bits == 0 { 0 } else { u64::MAX >> (64 - bits) };
            let v = addr.checked_shr(shift).unwrap_or(0) & mask;
            if v >= count {
                return Err(SimError::Config(format!("address {addr:#x}: {f:?} field {v} out of range")));
            }
            a.set(f, v);
            shift += bits;
        }
        if shift < 64 && addr >> shift != 0 {
            return Err(SimError::Config(format!("address {addr:#x} has bits above the map")));
        }
        Ok(a)
    }
}

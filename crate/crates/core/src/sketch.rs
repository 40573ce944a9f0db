//! Per-field count-min frequency index.
//!
//! One probabilistic counter grid per feature field: `depth` independent hash
//! rows of `width` counters each. Point queries take the minimum across rows,
//! which never underestimates the true insertion count. Counts are normalized
//! against a saturation threshold `eta` to yield frequency scores in `[0, 1]`.
//!
//! Addressing is `mix64(token ^ row_seed) & (width - 1)`, so counters are
//! portable across platforms and two sketches built with the same seeds can
//! be merged by element-wise addition.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hashing::{derive_seeds, seeded_hash};

const MAGIC: &[u8; 4] = b"UTSK";
const VERSION: u8 = 0x01;

#[derive(Debug, Clone)]
pub struct FrequencySketch {
    num_fields: usize,
    depth: usize,
    width: usize,
    eta: u64,
    total_inserted: u64,
    /// Per field: `depth` row seeds.
    row_seeds: Vec<Vec<u64>>,
    /// Per field: `depth * width` counters, row-major.
    counters: Vec<Vec<u64>>,
}

impl FrequencySketch {
    /// Creates an empty sketch. `width` must be a power of two and `eta`
    /// positive; row seeds are derived per field from `master_seed`.
    pub fn new(
        num_fields: usize,
        depth: usize,
        width: usize,
        eta: u64,
        master_seed: u64,
    ) -> Result<Self> {
        if num_fields == 0 || depth == 0 {
            return Err(Error::Parameter(
                "sketch requires positive num_fields and depth".into(),
            ));
        }
        if width == 0 || !width.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "sketch width must be a power of two, got {width}"
            )));
        }
        if eta == 0 {
            return Err(Error::Parameter("saturation threshold eta must be positive".into()));
        }
        let row_seeds: Vec<Vec<u64>> = (0..num_fields)
            .map(|f| derive_seeds(master_seed ^ (f as u64).wrapping_mul(0x9e37_79b9), depth))
            .collect();
        let counters = vec![vec![0u64; depth * width]; num_fields];
        Ok(Self {
            num_fields,
            depth,
            width,
            eta,
            total_inserted: 0,
            row_seeds,
            counters,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn eta(&self) -> u64 {
        self.eta
    }

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    fn check_field(&self, field: usize) -> Result<()> {
        if field >= self.num_fields {
            return Err(Error::FieldOutOfRange {
                field,
                num_fields: self.num_fields,
            });
        }
        Ok(())
    }

    #[inline]
    fn slot(&self, field: usize, row: usize, value: u64) -> usize {
        let h = seeded_hash(self.row_seeds[field][row], value);
        row * self.width + (h as usize & (self.width - 1))
    }

    /// Counts one occurrence of `value` in `field`.
    pub fn insert(&mut self, field: usize, value: u64) -> Result<()> {
        self.check_field(field)?;
        for row in 0..self.depth {
            let slot = self.slot(field, row, value);
            self.counters[field][slot] = self.counters[field][slot].saturating_add(1);
        }
        self.total_inserted += 1;
        Ok(())
    }

    /// Minimum across rows; never less than the true count of `(field, value)`.
    pub fn estimate(&self, field: usize, value: u64) -> Result<u64> {
        self.check_field(field)?;
        let mut min = u64::MAX;
        for row in 0..self.depth {
            min = min.min(self.counters[field][self.slot(field, row, value)]);
        }
        Ok(min)
    }

    /// `min(estimate, eta) / eta`, always in `[0, 1]`.
    pub fn normalized_freq(&self, field: usize, value: u64) -> Result<f64> {
        let est = self.estimate(field, value)?;
        Ok(est.min(self.eta) as f64 / self.eta as f64)
    }

    /// Element-wise counter sum. Requires identical shape, seeds, and eta:
    /// the result is then exactly what replaying both streams into one
    /// sketch would produce.
    pub fn merge(&mut self, delta: &FrequencySketch) -> Result<()> {
        if self.num_fields != delta.num_fields
            || self.depth != delta.depth
            || self.width != delta.width
        {
            return Err(Error::IncompatibleSketch(format!(
                "shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.num_fields, self.depth, self.width, delta.num_fields, delta.depth, delta.width
            )));
        }
        if self.eta != delta.eta {
            return Err(Error::IncompatibleSketch(format!(
                "eta mismatch: {} vs {}",
                self.eta, delta.eta
            )));
        }
        if self.row_seeds != delta.row_seeds {
            return Err(Error::IncompatibleSketch("row seed mismatch".into()));
        }
        for (mine, theirs) in self.counters.iter_mut().zip(&delta.counters) {
            for (c, d) in mine.iter_mut().zip(theirs) {
                *c = c.saturating_add(*d);
            }
        }
        self.total_inserted = self.total_inserted.saturating_add(delta.total_inserted);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        out.write_all(&(self.num_fields as u32).to_le_bytes())?;
        out.write_all(&(self.depth as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&self.eta.to_le_bytes())?;
        out.write_all(&self.total_inserted.to_le_bytes())?;
        for field in 0..self.num_fields {
            for &seed in &self.row_seeds[field] {
                out.write_all(&seed.to_le_bytes())?;
            }
            for &c in &self.counters[field] {
                out.write_all(&c.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "not a sketch file (magic {magic:02x?})"
            )));
        }
        let mut version = [0u8; 1];
        read_exact(&mut input, &mut version)?;
        if version[0] != VERSION {
            return Err(Error::Format(format!(
                "unsupported sketch version {}",
                version[0]
            )));
        }
        let num_fields = read_u32(&mut input)? as usize;
        let depth = read_u32(&mut input)? as usize;
        let width = read_u32(&mut input)? as usize;
        let eta = read_u64(&mut input)?;
        let total_inserted = read_u64(&mut input)?;
        if num_fields == 0 || depth == 0 || width == 0 || !width.is_power_of_two() || eta == 0 {
            return Err(Error::Format("sketch header fails validation".into()));
        }
        let mut row_seeds = Vec::with_capacity(num_fields);
        let mut counters = Vec::with_capacity(num_fields);
        for _ in 0..num_fields {
            let mut seeds = Vec::with_capacity(depth);
            for _ in 0..depth {
                seeds.push(read_u64(&mut input)?);
            }
            let mut grid = vec![0u64; depth * width];
            for c in grid.iter_mut() {
                *c = read_u64(&mut input)?;
            }
            row_seeds.push(seeds);
            counters.push(grid);
        }
        Ok(Self {
            num_fields,
            depth,
            width,
            eta,
            total_inserted,
            row_seeds,
            counters,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("sketch file truncated".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> FrequencySketch {
        FrequencySketch::new(2, 4, 1 << 10, 1000, 42).unwrap()
    }

    #[test]
    fn single_insert_estimates_one() {
        let mut s = small();
        s.insert(0, 123).unwrap();
        assert_eq!(s.estimate(0, 123).unwrap(), 1);
        assert_eq!(s.total_inserted(), 1);
    }

    #[test]
    fn triple_insert_estimates_three_without_collisions() {
        let mut s = small();
        for _ in 0..3 {
            s.insert(1, 99).unwrap();
        }
        // Width far exceeds distinct values inserted, so no row collides.
        assert_eq!(s.estimate(1, 99).unwrap(), 3);
    }

    #[test]
    fn empty_sketch_estimates_zero() {
        let s = small();
        assert_eq!(s.estimate(0, 7).unwrap(), 0);
        assert_eq!(s.normalized_freq(0, 7).unwrap(), 0.0);
    }

    #[test]
    fn unrelated_value_stays_zero_when_wide() {
        let mut s = small();
        for _ in 0..7 {
            s.insert(0, 1).unwrap();
        }
        assert_eq!(s.estimate(0, 2).unwrap(), 0);
    }

    #[test]
    fn field_out_of_range_errors() {
        let mut s = small();
        assert!(matches!(
            s.insert(2, 0),
            Err(Error::FieldOutOfRange { field: 2, .. })
        ));
        assert!(s.estimate(9, 0).is_err());
    }

    #[test]
    fn normalization_clamps_and_scales() {
        let mut s = FrequencySketch::new(1, 2, 1 << 8, 10, 7).unwrap();
        for _ in 0..5 {
            s.insert(0, 1).unwrap();
        }
        assert_eq!(s.normalized_freq(0, 1).unwrap(), 0.5);
        for _ in 0..20 {
            s.insert(0, 1).unwrap();
        }
        assert_eq!(s.normalized_freq(0, 1).unwrap(), 1.0);
    }

    #[test]
    fn estimate_never_underestimates_under_forced_collisions() {
        // Width 2 forces heavy collisions; the min-across-rows estimate must
        // still dominate the exact count for every probed value.
        let mut s = FrequencySketch::new(1, 3, 2, 1000, 5).unwrap();
        let mut exact: HashMap<u64, u64> = HashMap::new();
        let mut rng = crate::rng::SplitMix64::new(99);
        for _ in 0..500 {
            let v = rng.next_u64() % 40;
            s.insert(0, v).unwrap();
            *exact.entry(v).or_insert(0) += 1;
        }
        for (v, count) in exact {
            assert!(s.estimate(0, v).unwrap() >= count);
        }
    }

    #[test]
    fn merge_identity_and_replay_equivalence() {
        let mut a = small();
        let mut b = small();
        let mut replay = small();
        let mut rng = crate::rng::SplitMix64::new(1);
        for i in 0..300 {
            let field = (i % 2) as usize;
            let v = rng.next_u64() % 50;
            if i < 180 {
                a.insert(field, v).unwrap();
            } else {
                b.insert(field, v).unwrap();
            }
            replay.insert(field, v).unwrap();
        }
        let empty = small();
        let mut a_plus_empty = a.clone();
        a_plus_empty.merge(&empty).unwrap();
        assert_eq!(a_plus_empty.counters, a.counters);

        a.merge(&b).unwrap();
        assert_eq!(a.counters, replay.counters);
        assert_eq!(a.total_inserted(), replay.total_inserted());
    }

    #[test]
    fn merge_rejects_mismatches() {
        let mut a = small();
        let wider = FrequencySketch::new(2, 4, 1 << 11, 1000, 42).unwrap();
        assert!(matches!(a.merge(&wider), Err(Error::IncompatibleSketch(_))));
        let reseeded = FrequencySketch::new(2, 4, 1 << 10, 1000, 43).unwrap();
        assert!(matches!(
            a.merge(&reseeded),
            Err(Error::IncompatibleSketch(_))
        ));
        let other_eta = FrequencySketch::new(2, 4, 1 << 10, 500, 42).unwrap();
        assert!(matches!(
            a.merge(&other_eta),
            Err(Error::IncompatibleSketch(_))
        ));
    }

    #[test]
    fn save_load_roundtrip_is_byte_identical() {
        let mut s = small();
        let mut rng = crate::rng::SplitMix64::new(3);
        for _ in 0..200 {
            s.insert((rng.next_u64() % 2) as usize, rng.next_u64() % 64)
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.sk");
        let p2 = dir.path().join("b.sk");
        s.save(&p1).unwrap();
        let loaded = FrequencySketch::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.counters, s.counters);
        assert_eq!(loaded.row_seeds, s.row_seeds);
        assert_eq!(loaded.eta(), s.eta());
    }

    #[test]
    fn load_rejects_truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.sk");
        let mut s = small();
        s.insert(0, 1).unwrap();
        s.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(FrequencySketch::load(&p), Err(Error::Format(_))));

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&p, &corrupted).unwrap();
        assert!(matches!(FrequencySketch::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(FrequencySketch::new(1, 4, 100, 1000, 0).is_err()); // not pow2
        assert!(FrequencySketch::new(1, 4, 128, 0, 0).is_err()); // eta 0
        assert!(FrequencySketch::new(0, 4, 128, 10, 0).is_err());
    }
}

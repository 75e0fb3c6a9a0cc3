//! The `.spqr` container and storage-cost accounting.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header (56 bytes)
//!   magic "SPQR" | version u16 | flags u16 | m u32 | n u32
//!   b_w u8 | b_s u8 | b_z u8 | reserved u8 | beta1 u32 | beta2 u32
//!   tau f64 | lambda_rel f64 | target_outlier_rate f64 (0 = none) | outlier_count u32
//! permutation (n x u32, only when flag bit 0 is set)
//! group records, block-major then row-group:
//!   s_s f16 | z_s f16 | s_z f16 | z_z f16
//!   scale codes (b_s bits each, or f32 when b_s = 16)
//!   zero codes  (b_z bits each, or f32 when b_z = 16)
//!   weight codes (b_w bits each, row-major within the tile)
//! outliers: row_starts (m + 1) x u32, then per outlier [col u16][value f16]
//! ```
//!
//! Packed fields are LSB-first and each one is padded to a whole byte.

use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::hessian::{ActOrderKey, Permutation};
use crate::quant::CodeMatrix;
use crate::solver::{BilevelStats, OutlierSet, SolverConfig, StatGroup, StatVector, RAW_STATS_BITS};

pub const SPQR_MAGIC: [u8; 4] = *b"SPQR";
pub const SPQR_VERSION: u16 = 1;
pub const SPQR_HEADER_LEN: usize = 56;
/// Bytes per second-level record prefix (four binary16 scalars).
pub const GROUP_STATS_BYTES: usize = 8;
/// Bytes per stored outlier (column index + binary16 value).
pub const OUTLIER_ENTRY_BYTES: usize = 4;

const FLAG_PERMUTATION: u16 = 1 << 0;
const FLAG_ACT_ORDER: u16 = 1 << 1;
const FLAG_INVERSE_DIAG_KEY: u16 = 1 << 2;
const FLAG_INTEGER_ZERO: u16 = 1 << 3;
const FLAG_FULL_RANGE_SIGN: u16 = 1 << 4;
const FLAG_OUTLIERS: u16 = 1 << 5;
const KNOWN_FLAGS: u16 = (1 << 6) - 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed stream: {0}")]
    MalformedStream(String),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("corrupt outlier section: {0}")]
    CorruptCsr(String),
    #[error("outlier column {col} does not fit a 16-bit index")]
    ColumnIndexOverflow { col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A compressed weight matrix. Codes, statistics and outliers are stored in
/// processing (possibly permuted) column order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpqrTensor {
    pub config: SolverConfig,
    pub rows: usize,
    pub cols: usize,
    pub permutation: Option<Permutation>,
    pub codes: CodeMatrix,
    pub stats: BilevelStats,
    pub outliers: OutlierSet,
}

impl SpqrTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Checks that every component agrees with the header dimensions.
    pub fn check_shapes(&self) -> Result<(), FormatError> {
        let bad = |msg: String| Err(FormatError::ShapeMismatch(msg));
        let cfg = &self.config;
        if self.rows == 0 || self.cols == 0 {
            return bad("empty tensor".into());
        }
        if self.rows > u32::MAX as usize || self.cols > u32::MAX as usize {
            return bad("dimensions exceed u32".into());
        }
        if cfg.validate().is_err() {
            return bad(format!("invalid config {cfg:?}"));
        }
        if (self.codes.rows, self.codes.cols) != (self.rows, self.cols) || self.codes.bits != cfg.wbits {
            return bad("code matrix does not match header".into());
        }
        if self.codes.codes.iter().any(|&c| c as u32 > crate::quant::max_code(cfg.wbits)) {
            return bad("weight code exceeds bit width".into());
        }
        let st = &self.stats;
        if (st.rows, st.cols, st.beta1, st.beta2) != (self.rows, self.cols, cfg.beta1, cfg.beta2) {
            return bad("statistics do not match header".into());
        }
        if st.groups.len() != st.num_blocks() * st.num_row_groups() {
            return bad(format!(
                "{} statistic groups, expected {}",
                st.groups.len(),
                st.num_blocks() * st.num_row_groups()
            ));
        }
        for g in 0..st.num_row_groups() {
            let len = st.group_rows(g).len();
            for b in 0..st.num_blocks() {
                let grp = st.group(b, g);
                check_stat(&grp.scales, cfg.sbits, len)?;
                check_stat(&grp.zeros, cfg.zbits, len)?;
            }
        }
        if let Some(p) = &self.permutation {
            if p.len() != self.cols {
                return bad("permutation length differs from column count".into());
            }
        }
        if (self.outliers.rows(), self.outliers.cols()) != (self.rows, self.cols) {
            return bad("outlier set shape differs from tensor".into());
        }
        Ok(())
    }
}

fn check_stat(v: &StatVector, bits: u8, len: usize) -> Result<(), FormatError> {
    let ok = match v {
        StatVector::Raw(vals) => bits == RAW_STATS_BITS && vals.len() == len,
        StatVector::Quantized { bits: b, codes, .. } => {
            *b == bits
                && bits != RAW_STATS_BITS
                && codes.len() == len
                && codes.iter().all(|&c| c as u32 <= crate::quant::max_code(bits))
        }
    };
    if ok {
        Ok(())
    } else {
        Err(FormatError::ShapeMismatch(format!(
            "statistic vector does not match {bits} bits x {len} rows"
        )))
    }
}

/// Packs `values` (each `< 2^bits`) LSB-first into whole bytes.
pub fn pack_bits(values: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(values.len(), bits)];
    let mut pos = 0usize;
    for &v in values {
        let v = v as u16;
        let byte = pos / 8;
        let shift = pos % 8;
        out[byte] |= (v << shift) as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (v >> (8 - shift)) as u8;
        }
        pos += bits as usize;
    }
    out
}

/// Inverse of [`pack_bits`].
pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Vec<u8> {
    let mask = ((1u16 << bits) - 1) as u8;
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let byte = pos / 8;
        let shift = pos % 8;
        let mut v = (bytes[byte] as u16) >> shift;
        if shift + bits as usize > 8 {
            v |= (bytes[byte + 1] as u16) << (8 - shift);
        }
        out.push(v as u8 & mask);
        pos += bits as usize;
    }
    out
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn stat_field_len(len: u128, bits: u8) -> u128 {
    if bits == RAW_STATS_BITS {
        4 * len
    } else {
        (len * bits as u128).div_ceil(8)
    }
}

fn record_len(rows: u128, width: u128, config: &SolverConfig) -> u128 {
    GROUP_STATS_BYTES as u128
        + stat_field_len(rows, config.sbits)
        + stat_field_len(rows, config.zbits)
        + (rows * width * config.wbits as u128).div_ceil(8)
}

/// Byte length of the group record covering `rows x width` weights.
pub fn group_record_len(rows: usize, width: usize, config: &SolverConfig) -> usize {
    record_len(rows as u128, width as u128, config) as usize
}

/// Splits `total` into (count, size) classes of full groups and one ragged tail.
fn extents(total: usize, group: usize) -> [(u128, u128); 2] {
    let (full, rest) = (total / group, total % group);
    [(full as u128, group as u128), ((rest > 0) as u128, rest as u128)]
}

/// Total group-section bytes, in closed form so hostile headers cannot
/// stall or overflow the computation.
fn group_section_len(rows: usize, cols: usize, config: &SolverConfig) -> u128 {
    let mut total = 0;
    for (nb, width) in extents(cols, config.beta1) {
        for (ng, len) in extents(rows, config.beta2) {
            if nb > 0 && ng > 0 {
                total += nb * ng * record_len(len, width, config);
            }
        }
    }
    total
}

fn header_flags(t: &SpqrTensor) -> u16 {
    let c = &t.config;
    let mut flags = 0;
    let mut set = |cond: bool, bit: u16| {
        if cond {
            flags |= bit
        }
    };
    set(t.permutation.is_some(), FLAG_PERMUTATION);
    set(c.act_order, FLAG_ACT_ORDER);
    set(c.act_order_key == ActOrderKey::InverseDiagAsc, FLAG_INVERSE_DIAG_KEY);
    set(c.integer_zero, FLAG_INTEGER_ZERO);
    set(c.full_range_sign, FLAG_FULL_RANGE_SIGN);
    set(c.outliers_enabled, FLAG_OUTLIERS);
    flags
}

fn write_stat(out: &mut Vec<u8>, v: &StatVector) {
    match v {
        StatVector::Raw(vals) => {
            for x in vals {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        StatVector::Quantized { bits, codes, .. } => out.extend_from_slice(&pack_bits(codes, *bits)),
    }
}

fn stat_grid(v: &StatVector) -> (f16, f16) {
    match v {
        StatVector::Quantized { scale, zero, .. } => (*scale, *zero),
        StatVector::Raw(_) => (f16::ZERO, f16::ZERO),
    }
}

/// Serializes a tensor.
pub fn encode(t: &SpqrTensor) -> Result<Vec<u8>, FormatError> {
    t.check_shapes()?;
    if let Some(&c) = t.outliers.col_indices().iter().find(|&&c| c > u16::MAX as u32) {
        return Err(FormatError::ColumnIndexOverflow { col: c as usize });
    }
    let (m, n) = (t.rows, t.cols);
    let c = &t.config;
    let mut out = Vec::with_capacity(measure_actual_bits(t).total_bytes);

    out.extend_from_slice(&SPQR_MAGIC);
    out.extend_from_slice(&SPQR_VERSION.to_le_bytes());
    out.extend_from_slice(&header_flags(t).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&[c.wbits, c.sbits, c.zbits, 0]);
    out.extend_from_slice(&(c.beta1 as u32).to_le_bytes());
    out.extend_from_slice(&(c.beta2 as u32).to_le_bytes());
    out.extend_from_slice(&c.tau.to_le_bytes());
    out.extend_from_slice(&c.lambda_rel.to_le_bytes());
    out.extend_from_slice(&c.target_outlier_rate.unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&(t.outliers.len() as u32).to_le_bytes());
    debug_assert_eq!(out.len(), SPQR_HEADER_LEN);

    if let Some(p) = &t.permutation {
        for &i in p.order() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }

    let st = &t.stats;
    let mut tile = Vec::new();
    for b in 0..st.num_blocks() {
        let cols_b = st.block_cols(b);
        for g in 0..st.num_row_groups() {
            let grp = st.group(b, g);
            let (s_s, z_s) = stat_grid(&grp.scales);
            let (s_z, z_z) = stat_grid(&grp.zeros);
            for h in [s_s, z_s, s_z, z_z] {
                out.extend_from_slice(&h.to_le_bytes());
            }
            write_stat(&mut out, &grp.scales);
            write_stat(&mut out, &grp.zeros);
            tile.clear();
            for r in st.group_rows(g) {
                let row = &t.codes.codes[r * n..(r + 1) * n];
                tile.extend_from_slice(&row[cols_b.clone()]);
            }
            out.extend_from_slice(&pack_bits(&tile, c.wbits));
        }
    }

    for &s in t.outliers.row_starts() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for (&col, &val) in t.outliers.col_indices().iter().zip(t.outliers.values()) {
        out.extend_from_slice(&(col as u16).to_le_bytes());
        out.extend_from_slice(&val.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::MalformedStream(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f16(&mut self) -> Result<f16, FormatError> {
        Ok(f16::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn stat(&mut self, bits: u8, len: usize, grid: (f16, f16)) -> Result<StatVector, FormatError> {
        if bits == RAW_STATS_BITS {
            let raw = self.take(4 * len)?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::MalformedStream("non-finite raw statistic".into()));
            }
            Ok(StatVector::Raw(vals))
        } else {
            let codes = unpack_bits(self.take(packed_len(len, bits))?, bits, len);
            Ok(StatVector::Quantized {
                scale: grid.0,
                zero: grid.1,
                bits,
                codes,
            })
        }
    }
}

/// Parses a tensor, rejecting anything that [`encode`] could not have produced.
pub fn decode(bytes: &[u8]) -> Result<SpqrTensor, FormatError> {
    let malformed = |msg: String| FormatError::MalformedStream(msg);
    let mut rd = Reader { bytes, pos: 0 };
    if rd.array::<4>()? != SPQR_MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let version = rd.u16()?;
    if version != SPQR_VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    let flags = rd.u16()?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(malformed(format!("unknown flag bits {flags:#06x}")));
    }
    let m = rd.u32()? as usize;
    let n = rd.u32()? as usize;
    let (wbits, sbits, zbits, reserved) = (rd.u8()?, rd.u8()?, rd.u8()?, rd.u8()?);
    if reserved != 0 {
        return Err(malformed("reserved header byte is not zero".into()));
    }
    let beta1 = rd.u32()? as usize;
    let beta2 = rd.u32()? as usize;
    let tau = rd.f64()?;
    let lambda_rel = rd.f64()?;
    let target = rd.f64()?;
    let outlier_count = rd.u32()? as usize;

    let has = |bit: u16| flags & bit != 0;
    let config = SolverConfig {
        wbits,
        sbits,
        zbits,
        beta1,
        beta2,
        tau,
        lambda_rel,
        act_order: has(FLAG_ACT_ORDER),
        act_order_key: if has(FLAG_INVERSE_DIAG_KEY) {
            ActOrderKey::InverseDiagAsc
        } else {
            ActOrderKey::HessianDiagDesc
        },
        integer_zero: has(FLAG_INTEGER_ZERO),
        full_range_sign: has(FLAG_FULL_RANGE_SIGN),
        outliers_enabled: has(FLAG_OUTLIERS),
        target_outlier_rate: (target != 0.0).then_some(target),
    };
    config
        .validate()
        .map_err(|e| malformed(format!("header config: {e}")))?;
    if m == 0 || n == 0 {
        return Err(malformed("zero dimension".into()));
    }

    // Check the total length before allocating anything sized by the header.
    let perm_len = if has(FLAG_PERMUTATION) { 4 * n } else { 0 };
    let expected = SPQR_HEADER_LEN as u128
        + perm_len as u128
        + group_section_len(m, n, &config)
        + 4 * (m as u128 + 1);
    if (bytes.len() as u128) < expected {
        return Err(malformed(format!(
            "stream is {} bytes, header implies at least {expected}",
            bytes.len()
        )));
    }

    let permutation = if has(FLAG_PERMUTATION) {
        let order = (0..n)
            .map(|_| rd.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        Some(Permutation::new(order).map_err(|e| malformed(format!("permutation: {e}")))?)
    } else {
        None
    };

    let mut codes = CodeMatrix::zeros(m, n, wbits);
    let num_blocks = n.div_ceil(beta1);
    let num_groups = m.div_ceil(beta2);
    let mut groups = Vec::with_capacity(num_blocks * num_groups);
    for b in 0..num_blocks {
        let c0 = b * beta1;
        let width = beta1.min(n - c0);
        for g in 0..num_groups {
            let r0 = g * beta2;
            let len = beta2.min(m - r0);
            let s_grid = (rd.f16()?, rd.f16()?);
            let z_grid = (rd.f16()?, rd.f16()?);
            let scales = rd.stat(sbits, len, s_grid)?;
            let zeros = rd.stat(zbits, len, z_grid)?;
            for (name, v) in [("scale", &scales), ("zero", &zeros)] {
                if let StatVector::Raw(_) = v {
                    continue;
                }
                let grid = if name == "scale" { s_grid } else { z_grid };
                if !grid.0.is_finite() || !grid.1.is_finite() {
                    return Err(malformed(format!("non-finite {name} grid")));
                }
            }
            if matches!(scales, StatVector::Raw(_)) && s_grid != (f16::ZERO, f16::ZERO)
                || matches!(zeros, StatVector::Raw(_)) && z_grid != (f16::ZERO, f16::ZERO)
            {
                return Err(malformed("raw statistics carry a non-zero grid".into()));
            }
            let tile = unpack_bits(rd.take(packed_len(len * width, wbits))?, wbits, len * width);
            for (i, r) in (r0..r0 + len).enumerate() {
                codes.codes[r * n + c0..r * n + c0 + width]
                    .copy_from_slice(&tile[i * width..(i + 1) * width]);
            }
            groups.push(StatGroup { scales, zeros });
        }
    }

    let row_starts = (0..=m).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
    if row_starts.windows(2).any(|w| w[0] > w[1]) {
        return Err(FormatError::CorruptCsr("row starts decrease".into()));
    }
    if row_starts[0] != 0 || row_starts[m] as usize != outlier_count {
        return Err(FormatError::CorruptCsr(format!(
            "row starts span {}..{} but the header declares {outlier_count} outliers",
            row_starts[0], row_starts[m]
        )));
    }
    let remaining = bytes.len() - rd.pos;
    if remaining != outlier_count * OUTLIER_ENTRY_BYTES {
        return Err(malformed(format!(
            "{remaining} bytes remain for {outlier_count} outliers"
        )));
    }
    let mut col_indices = Vec::with_capacity(outlier_count);
    let mut values = Vec::with_capacity(outlier_count);
    for _ in 0..outlier_count {
        col_indices.push(rd.u16()? as u32);
        let v = rd.f16()?;
        if !v.is_finite() {
            return Err(FormatError::CorruptCsr("non-finite outlier value".into()));
        }
        values.push(v);
    }
    let outliers =
        OutlierSet::from_csr(m, n, row_starts, col_indices, values).map_err(FormatError::CorruptCsr)?;

    let tensor = SpqrTensor {
        config,
        rows: m,
        cols: n,
        permutation,
        codes,
        stats: BilevelStats {
            rows: m,
            cols: n,
            beta1,
            beta2,
            groups,
        },
        outliers,
    };
    tensor
        .check_shapes()
        .map_err(|e| malformed(e.to_string()))?;
    Ok(tensor)
}

pub fn write_spqr(t: &SpqrTensor, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_spqr(path: impl AsRef<Path>) -> Result<SpqrTensor, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Modelled bits per parameter and its components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BitsEstimate {
    pub avg_bits: f64,
    pub base: f64,
    pub first_level: f64,
    pub second_level: f64,
    pub outliers: f64,
}

/// `b_w + (b_s + b_z)/β1 + 64/(β1·β2) + 32·r_o`.
///
/// A statistic kept raw ([`RAW_STATS_BITS`]) costs 16 bits per β1 weights
/// and has no second-level term.
pub fn estimate_avg_bits(
    wbits: u8,
    sbits: u8,
    zbits: u8,
    beta1: usize,
    beta2: usize,
    outlier_rate: f64,
) -> BitsEstimate {
    let (b1, b2) = (beta1 as f64, beta2 as f64);
    let second = |bits: u8| if bits == RAW_STATS_BITS { 0.0 } else { 32.0 / (b1 * b2) };
    let base = wbits as f64;
    let first_level = (sbits as f64 + zbits as f64) / b1;
    let second_level = second(sbits) + second(zbits);
    let outliers = 32.0 * outlier_rate;
    BitsEstimate {
        avg_bits: base + first_level + second_level + outliers,
        base,
        first_level,
        second_level,
        outliers,
    }
}

/// Bits per parameter of plain group quantization with a 16-bit scale and
/// zero per group of `group_size` weights.
pub fn baseline_avg_bits(wbits: u8, group_size: usize) -> f64 {
    wbits as f64 + 32.0 / group_size as f64
}

/// Encoded size of a tensor, section by section.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SizeBreakdown {
    pub header_bytes: usize,
    pub permutation_bytes: usize,
    pub group_bytes: usize,
    pub csr_bytes: usize,
    pub total_bytes: usize,
    /// `(group + csr) bits / (m·n)`; the fixed header and the optional
    /// permutation are excluded.
    pub bits_per_param: f64,
    /// CSR bits divided by the outlier count (`None` without outliers).
    pub bits_per_outlier: Option<f64>,
}

pub fn measure_actual_bits(t: &SpqrTensor) -> SizeBreakdown {
    let (m, n) = (t.rows, t.cols);
    let permutation_bytes = if t.permutation.is_some() { 4 * n } else { 0 };
    let group_bytes = group_section_len(m, n, &t.config) as usize;
    let count = t.outliers.len();
    let csr_bytes = 4 * (m + 1) + OUTLIER_ENTRY_BYTES * count;
    let total_bytes = SPQR_HEADER_LEN + permutation_bytes + group_bytes + csr_bytes;
    SizeBreakdown {
        header_bytes: SPQR_HEADER_LEN,
        permutation_bytes,
        group_bytes,
        csr_bytes,
        total_bytes,
        bits_per_param: 8.0 * (group_bytes + csr_bytes) as f64 / (m * n) as f64,
        bits_per_outlier: (count > 0).then(|| 8.0 * csr_bytes as f64 / count as f64),
    }
}

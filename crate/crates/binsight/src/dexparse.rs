//! DEX header parsing for section-aware byte coloring.
//!
//! Only the fixed 112-byte header is read; the `(offset, size)` fields it
//! declares are enough to partition a file into coarse section ranges. A file
//! that is not a DEX (or whose header is inconsistent) degrades to one
//! `Unsegmented` range covering every byte, so arbitrary binaries stay
//! convertible.

use crate::error::{Error, Result};

pub const DEX_HEADER_LEN: usize = 112;
const ENDIAN_CONSTANT: u32 = 0x1234_5678;

/// Coarse semantic class of a byte offset inside a DEX file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionClass {
    /// Fixed 112-byte header.
    Header,
    /// String/type/proto/field/method id tables.
    Ids,
    /// Class definition table.
    ClassDefs,
    /// The data section.
    Data,
    /// Anything not claimed by a header field, or a whole non-DEX file.
    Unsegmented,
}

/// Contiguous byte range holding a single section class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionRange {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub section: SectionClass,
}

/// Ordered, non-overlapping ranges jointly covering `[0, total_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DexSectionMap {
    pub total_size: usize,
    pub ranges: Vec<SectionRange>,
    /// Set when a DEX magic was present but the header was inconsistent and
    /// the file fell back to a single `Unsegmented` range.
    pub warning: bool,
}

impl DexSectionMap {
    fn unsegmented(total_size: usize, warning: bool) -> DexSectionMap {
        DexSectionMap {
            total_size,
            ranges: vec![SectionRange {
                start: 0,
                end: total_size,
                section: SectionClass::Unsegmented,
            }],
            warning,
        }
    }

    /// Section containing `offset`.
    pub fn classify_offset(&self, offset: usize) -> Result<SectionClass> {
        if offset >= self.total_size {
            return Err(Error::OffsetOutOfRange {
                offset,
                total: self.total_size,
            });
        }
        // Ranges cover [0, total) without gaps, so the partition point is it.
        let idx = self.ranges.partition_point(|r| r.end <= offset);
        Ok(self.ranges[idx].section)
    }
}

fn read_u32(raw: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(raw[offset..offset + 4].try_into().expect("4 bytes"))
}

fn has_dex_magic(raw: &[u8]) -> bool {
    raw.len() >= 8
        && &raw[0..4] == b"dex\n"
        && raw[4..7].iter().all(u8::is_ascii_digit)
        && raw[7] == 0
}

/// Parses the header of `raw` into a [`DexSectionMap`].
///
/// Non-DEX input is not an error: it yields a single `Unsegmented` range.
/// A DEX magic with an inconsistent header (declared ranges overlapping or
/// reaching past the end of the file) also degrades to `Unsegmented`, with
/// [`DexSectionMap::warning`] set. Only empty input is rejected.
pub fn parse_dex_header(raw: &[u8]) -> Result<DexSectionMap> {
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total = raw.len();
    if !has_dex_magic(raw) || total < DEX_HEADER_LEN {
        return Ok(DexSectionMap::unsegmented(total, false));
    }

    let header_size = read_u32(raw, 36) as usize;
    let endian_tag = read_u32(raw, 40);
    if header_size != DEX_HEADER_LEN || endian_tag != ENDIAN_CONSTANT {
        return Ok(DexSectionMap::unsegmented(total, true));
    }

    // (size field offset, offset field offset, bytes per entry, class)
    const TABLES: [(usize, usize, usize, SectionClass); 7] = [
        (56, 60, 4, SectionClass::Ids),  // string_ids
        (64, 68, 4, SectionClass::Ids),  // type_ids
        (72, 76, 12, SectionClass::Ids), // proto_ids
        (80, 84, 8, SectionClass::Ids),  // field_ids
        (88, 92, 8, SectionClass::Ids),  // method_ids
        (96, 100, 32, SectionClass::ClassDefs),
        (104, 108, 1, SectionClass::Data), // data_size is already in bytes
    ];

    let mut claimed = vec![SectionRange {
        start: 0,
        end: DEX_HEADER_LEN,
        section: SectionClass::Header,
    }];
    for (size_at, off_at, entry_bytes, section) in TABLES {
        let count = read_u32(raw, size_at) as usize;
        if count == 0 {
            continue;
        }
        let start = read_u32(raw, off_at) as usize;
        let Some(len) = count.checked_mul(entry_bytes) else {
            return Ok(DexSectionMap::unsegmented(total, true));
        };
        let Some(end) = start.checked_add(len) else {
            return Ok(DexSectionMap::unsegmented(total, true));
        };
        if end > total {
            return Ok(DexSectionMap::unsegmented(total, true));
        }
        claimed.push(SectionRange { start, end, section });
    }

    claimed.sort_by_key(|r| (r.start, r.end));
    for pair in claimed.windows(2) {
        if pair[1].start < pair[0].end {
            return Ok(DexSectionMap::unsegmented(total, true));
        }
    }

    // Fill gaps with Unsegmented and merge adjacent same-class ranges.
    let mut ranges: Vec<SectionRange> = Vec::new();
    let mut cursor = 0;
    for r in claimed {
        if r.start > cursor {
            push_merged(
                &mut ranges,
                SectionRange {
                    start: cursor,
                    end: r.start,
                    section: SectionClass::Unsegmented,
                },
            );
        }
        push_merged(&mut ranges, r);
        cursor = r.end;
    }
    if cursor < total {
        push_merged(
            &mut ranges,
            SectionRange {
                start: cursor,
                end: total,
                section: SectionClass::Unsegmented,
            },
        );
    }

    Ok(DexSectionMap {
        total_size: total,
        ranges,
        warning: false,
    })
}

fn push_merged(ranges: &mut Vec<SectionRange>, r: SectionRange) {
    if let Some(last) = ranges.last_mut() {
        if last.section == r.section && last.end == r.start {
            last.end = r.end;
            return;
        }
    }
    ranges.push(r);
}

/// Hand-built minimal DEX: 112-byte header followed by 16 data bytes.
/// Field values chosen per the public format; verified against a hex
/// dump of the buffer below.
#[cfg(test)]
pub(crate) fn fixture_dex() -> Vec<u8> {
    let mut d = vec![0u8; 0x80];
    d[0..8].copy_from_slice(b"dex\n035\0");
    // checksum (8..12) and signature (12..32) left zero
    d[32..36].copy_from_slice(&0x80u32.to_le_bytes()); // file_size
    d[36..40].copy_from_slice(&0x70u32.to_le_bytes()); // header_size
    d[40..44].copy_from_slice(&ENDIAN_CONSTANT.to_le_bytes());
    d[104..108].copy_from_slice(&16u32.to_le_bytes()); // data_size
    d[108..112].copy_from_slice(&0x70u32.to_le_bytes()); // data_off
    for (i, b) in d[0x70..0x80].iter_mut().enumerate() {
        *b = (i * 16) as u8;
    }
    d
}

//! Minimal executable-like container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | section_count u16 | flags u16 | (kind u8, len u32) * section_count
//!          | section bytes in table order | overlay bytes to EOF
//! ```
//!
//! Files that do not start with a container magic are wrapped losslessly as
//! a single data section with no framing, so arbitrary real binaries can be
//! ingested byte-for-byte.

mod corpus;
mod generate;

pub use corpus::{load_corpus, save_corpus, CorpusManifest, ManifestEntry, MANIFEST_FILE};
pub use generate::{
    default_corpus_spec, generate_corpus, generate_family, motif_offsets, Anchor, CorpusSpec,
    FamilyEntry, FamilySpec, Filler, MotifSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"MVX1";
pub const PACKED_MAGIC: [u8; 4] = *b"MVXP";
/// magic + section_count + flags
pub const FIXED_HEADER_LEN: usize = 8;
pub const SECTION_ENTRY_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Base,
    Packed,
    Morphed,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Base => "base",
            Origin::Packed => "packed",
            Origin::Morphed => "morphed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Code,
    Data,
    Resource,
}

impl SectionKind {
    pub fn to_byte(self) -> u8 {
        match self {
            SectionKind::Code => 0,
            SectionKind::Data => 1,
            SectionKind::Resource => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SectionKind::Code),
            1 => Some(SectionKind::Data),
            2 => Some(SectionKind::Resource),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct HeaderFlags {
    pub packed_stub_present: bool,
    pub has_code_section: bool,
}

impl HeaderFlags {
    const PACKED: u16 = 1;
    const CODE: u16 = 1 << 1;

    pub fn bits(self) -> u16 {
        let mut b = 0;
        if self.packed_stub_present {
            b |= Self::PACKED;
        }
        if self.has_code_section {
            b |= Self::CODE;
        }
        b
    }

    pub fn from_bits(bits: u16) -> Self {
        HeaderFlags {
            packed_stub_present: bits & Self::PACKED != 0,
            has_code_section: bits & Self::CODE != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 4],
    pub section_count: u16,
    pub flags: HeaderFlags,
    /// Raw flag word as read; keeps unknown bits so serialization is exact.
    pub flag_bits: u16,
    pub declared_sizes: Vec<u32>,
}

impl Header {
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + SECTION_ENTRY_LEN * self.declared_sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: SectionKind,
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn new(kind: SectionKind, bytes: Vec<u8>) -> Self {
        Section { kind, bytes }
    }
}

/// How a binary is framed on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    Container,
    /// Foreign file kept verbatim as one data section; no header is written.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binary {
    pub id: String,
    pub family: String,
    pub year: Option<i32>,
    pub origin: Origin,
    pub parent_id: Option<String>,
    pub framing: Framing,
    pub header: Header,
    pub sections: Vec<Section>,
    pub overlay: Vec<u8>,
}

impl Binary {
    /// Builds a container binary, deriving the header from the sections.
    pub fn new(
        id: impl Into<String>,
        family: impl Into<String>,
        magic: [u8; 4],
        sections: Vec<Section>,
        overlay: Vec<u8>,
    ) -> Self {
        let header = header_for(magic, &sections);
        Binary {
            id: id.into(),
            family: family.into(),
            year: None,
            origin: Origin::Base,
            parent_id: None,
            framing: Framing::Container,
            header,
            sections,
            overlay,
        }
    }

    /// Replaces the section list and rebuilds the header to match it.
    pub fn set_sections(&mut self, sections: Vec<Section>) {
        let mut header = header_for(self.header.magic, &sections);
        // keep unknown flag bits from the original header
        let known = HeaderFlags::PACKED | HeaderFlags::CODE;
        header.flag_bits |= self.header.flag_bits & !known;
        self.header = header;
        self.sections = sections;
    }

    pub fn is_packed(&self) -> bool {
        self.framing == Framing::Container
            && (self.header.magic == PACKED_MAGIC || self.header.flags.packed_stub_present)
    }

    pub fn code_section(&self) -> Option<usize> {
        self.sections.iter().position(|s| s.kind == SectionKind::Code)
    }

    /// Length of header plus all section bytes (everything before the overlay).
    pub fn body_len(&self) -> usize {
        let header = match self.framing {
            Framing::Container => self.header.encoded_len(),
            Framing::Raw => 0,
        };
        header + self.sections.iter().map(|s| s.bytes.len()).sum::<usize>()
    }

    pub fn serialized_len(&self) -> usize {
        self.body_len() + self.overlay.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.origin != Origin::Base && self.parent_id.is_none() {
            return Err(Error::InvalidSpec(format!(
                "{}: transformed binary without parent",
                self.id
            )));
        }
        if self.framing == Framing::Raw {
            return Ok(());
        }
        let h = &self.header;
        if h.magic != CONTAINER_MAGIC && h.magic != PACKED_MAGIC {
            return Err(Error::InvalidSpec(format!("{}: unknown magic", self.id)));
        }
        if h.section_count as usize != h.declared_sizes.len()
            || h.declared_sizes.len() != self.sections.len()
        {
            return Err(Error::InvalidSpec(format!(
                "{}: section count mismatch",
                self.id
            )));
        }
        for (s, &d) in self.sections.iter().zip(&h.declared_sizes) {
            if s.bytes.len() != d as usize {
                return Err(Error::InvalidSpec(format!(
                    "{}: section length differs from declared size",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn header_for(magic: [u8; 4], sections: &[Section]) -> Header {
    let flags = HeaderFlags {
        packed_stub_present: magic == PACKED_MAGIC,
        has_code_section: sections.iter().any(|s| s.kind == SectionKind::Code),
    };
    Header {
        magic,
        section_count: sections.len() as u16,
        flags,
        flag_bits: flags.bits(),
        declared_sizes: sections.iter().map(|s| s.bytes.len() as u32).collect(),
    }
}

/// Parses container bytes. Input without a container magic is wrapped as a
/// raw single data section; only a container whose declared sizes run past
/// the end of input is rejected.
pub fn parse(bytes: &[u8]) -> Result<Binary> {
    let magic_ok = bytes.len() >= FIXED_HEADER_LEN
        && (bytes[..4] == CONTAINER_MAGIC || bytes[..4] == PACKED_MAGIC);
    if !magic_ok {
        return Ok(wrap_raw(bytes));
    }
    match parse_container(bytes)? {
        Some(b) => Ok(b),
        None => Ok(wrap_raw(bytes)),
    }
}

fn parse_container(bytes: &[u8]) -> Result<Option<Binary>> {
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    let section_count = u16::from_le_bytes([bytes[4], bytes[5]]);
    let flag_bits = u16::from_le_bytes([bytes[6], bytes[7]]);
    let table_end = FIXED_HEADER_LEN + SECTION_ENTRY_LEN * section_count as usize;
    if table_end > bytes.len() {
        return Err(Error::TruncatedInput(format!(
            "section table needs {table_end} bytes, have {}",
            bytes.len()
        )));
    }
    let mut kinds = Vec::with_capacity(section_count as usize);
    let mut sizes = Vec::with_capacity(section_count as usize);
    for i in 0..section_count as usize {
        let at = FIXED_HEADER_LEN + SECTION_ENTRY_LEN * i;
        let Some(kind) = SectionKind::from_byte(bytes[at]) else {
            // not one of ours after all
            return Ok(None);
        };
        kinds.push(kind);
        sizes.push(u32::from_le_bytes(bytes[at + 1..at + 5].try_into().unwrap()));
    }
    let total: u64 = sizes.iter().map(|&s| s as u64).sum();
    if table_end as u64 + total > bytes.len() as u64 {
        return Err(Error::TruncatedInput(format!(
            "declared sections need {} bytes, have {}",
            table_end as u64 + total,
            bytes.len()
        )));
    }
    let mut at = table_end;
    let mut sections = Vec::with_capacity(kinds.len());
    for (kind, &size) in kinds.into_iter().zip(&sizes) {
        let end = at + size as usize;
        sections.push(Section::new(kind, bytes[at..end].to_vec()));
        at = end;
    }
    Ok(Some(Binary {
        id: String::new(),
        family: String::new(),
        year: None,
        origin: Origin::Base,
        parent_id: None,
        framing: Framing::Container,
        header: Header {
            magic,
            section_count,
            flags: HeaderFlags::from_bits(flag_bits),
            flag_bits,
            declared_sizes: sizes,
        },
        sections,
        overlay: bytes[at..].to_vec(),
    }))
}

fn wrap_raw(bytes: &[u8]) -> Binary {
    let sections = vec![Section::new(SectionKind::Data, bytes.to_vec())];
    let mut b = Binary::new("", "", CONTAINER_MAGIC, sections, Vec::new());
    b.framing = Framing::Raw;
    b
}

pub fn serialize(b: &Binary) -> Vec<u8> {
    let mut out = Vec::with_capacity(b.serialized_len());
    if b.framing == Framing::Container {
        let h = &b.header;
        out.extend_from_slice(&h.magic);
        out.extend_from_slice(&h.section_count.to_le_bytes());
        out.extend_from_slice(&h.flag_bits.to_le_bytes());
        for (s, size) in b.sections.iter().zip(&h.declared_sizes) {
            out.push(s.kind.to_byte());
            out.extend_from_slice(&size.to_le_bytes());
        }
    }
    for s in &b.sections {
        out.extend_from_slice(&s.bytes);
    }
    out.extend_from_slice(&b.overlay);
    out
}

//! Minimal ELF handling: extracting the `.text` section from 32/64-bit
//! little-endian ELF files, and building a minimal well-formed 64-bit ELF
//! around a given `.text` payload (used by the synthetic compile backend).

use thiserror::Error;

pub const ELF_MAGIC: [u8; 4] = [0x7F, b'E', b'L', b'F'];

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("missing ELF magic (first bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported ELF class {0} (expected 1 = 32-bit or 2 = 64-bit)")]
    BadClass(u8),
    #[error("unsupported ELF data encoding {0} (only little-endian is supported)")]
    BadEncoding(u8),
    #[error("truncated ELF: {0}")]
    Truncated(String),
    #[error("no .text section in section header table ({0} sections scanned)")]
    NoTextSection(usize),
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn bytes(&self, off: usize, len: usize, what: &str) -> Result<&'a [u8], ElfError> {
        self.data
            .get(off..off.checked_add(len).ok_or_else(|| ElfError::Truncated(what.to_string()))?)
            .ok_or_else(|| {
                ElfError::Truncated(format!(
                    "{what} at offset {off} (+{len}) exceeds file size {}",
                    self.data.len()
                ))
            })
    }

    fn u16(&self, off: usize, what: &str) -> Result<u16, ElfError> {
        Ok(u16::from_le_bytes(self.bytes(off, 2, what)?.try_into().unwrap()))
    }

    fn u32(&self, off: usize, what: &str) -> Result<u32, ElfError> {
        Ok(u32::from_le_bytes(self.bytes(off, 4, what)?.try_into().unwrap()))
    }

    fn u64(&self, off: usize, what: &str) -> Result<u64, ElfError> {
        Ok(u64::from_le_bytes(self.bytes(off, 8, what)?.try_into().unwrap()))
    }
}

/// Returns the raw bytes of the section named `.text`.
///
/// Handles both 32- and 64-bit little-endian ELF files by walking the
/// section header table and resolving names through the section-name
/// string table.
pub fn extract_text_section(data: &[u8]) -> Result<Vec<u8>, ElfError> {
    let r = Reader { data };
    let magic = r.bytes(0, 4, "ELF magic")?;
    if magic != ELF_MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(ElfError::BadMagic(m));
    }
    let class = r.bytes(4, 1, "EI_CLASS")?[0];
    let encoding = r.bytes(5, 1, "EI_DATA")?[0];
    if encoding != 1 {
        return Err(ElfError::BadEncoding(encoding));
    }

    // (e_shoff, e_shentsize, e_shnum, e_shstrndx) and per-header field offsets
    let (shoff, shentsize, shnum, shstrndx, off_off, size_off) = match class {
        1 => (
            r.u32(0x20, "e_shoff")? as u64,
            r.u16(0x2E, "e_shentsize")?,
            r.u16(0x30, "e_shnum")?,
            r.u16(0x32, "e_shstrndx")?,
            0x10usize,
            0x14usize,
        ),
        2 => (
            r.u64(0x28, "e_shoff")?,
            r.u16(0x3A, "e_shentsize")?,
            r.u16(0x3C, "e_shnum")?,
            r.u16(0x3E, "e_shstrndx")?,
            0x18usize,
            0x20usize,
        ),
        c => return Err(ElfError::BadClass(c)),
    };
    if shnum == 0 || shoff == 0 {
        return Err(ElfError::Truncated("no section header table (e_shnum or e_shoff is 0)".into()));
    }
    if shstrndx >= shnum {
        return Err(ElfError::Truncated(format!("e_shstrndx {shstrndx} >= e_shnum {shnum}")));
    }

    let header = |index: u16| -> Result<(u32, u64, u64), ElfError> {
        let base = shoff as usize + index as usize * shentsize as usize;
        let name = r.u32(base, "sh_name")?;
        let (offset, size) = if class == 2 {
            (r.u64(base + off_off, "sh_offset")?, r.u64(base + size_off, "sh_size")?)
        } else {
            (r.u32(base + off_off, "sh_offset")? as u64, r.u32(base + size_off, "sh_size")? as u64)
        };
        Ok((name, offset, size))
    };

    let (_, strtab_off, strtab_size) = header(shstrndx)?;
    let strtab = r.bytes(strtab_off as usize, strtab_size as usize, ".shstrtab contents")?;

    for index in 0..shnum {
        let (name, offset, size) = header(index)?;
        let name_bytes = strtab.get(name as usize..).unwrap_or(&[]);
        let end = name_bytes.iter().position(|&b| b == 0).unwrap_or(name_bytes.len());
        if &name_bytes[..end] == b".text" {
            return Ok(r.bytes(offset as usize, size as usize, ".text contents")?.to_vec());
        }
    }
    Err(ElfError::NoTextSection(shnum as usize))
}

/// Builds a minimal well-formed 64-bit little-endian ELF (ET_REL) whose
/// `.text` section holds `text`. The file carries three sections: the null
/// section, `.text`, and `.shstrtab`.
pub fn build_minimal_elf64(text: &[u8]) -> Vec<u8> {
    const EHSIZE: usize = 64;
    const SHENTSIZE: usize = 64;
    let shstrtab: &[u8] = b"\0.text\0.shstrtab\0";
    let text_off = EHSIZE;
    let strtab_off = text_off + text.len();
    let shoff = (strtab_off + shstrtab.len() + 7) & !7;

    let mut out = Vec::with_capacity(shoff + 3 * SHENTSIZE);
    out.extend_from_slice(&ELF_MAGIC);
    out.push(2); // 64-bit
    out.push(1); // little-endian
    out.push(1); // EV_CURRENT
    out.extend_from_slice(&[0u8; 9]); // OS ABI + padding
    out.extend_from_slice(&1u16.to_le_bytes()); // e_type = ET_REL
    out.extend_from_slice(&62u16.to_le_bytes()); // e_machine = EM_X86_64
    out.extend_from_slice(&1u32.to_le_bytes()); // e_version
    out.extend_from_slice(&0u64.to_le_bytes()); // e_entry
    out.extend_from_slice(&0u64.to_le_bytes()); // e_phoff
    out.extend_from_slice(&(shoff as u64).to_le_bytes()); // e_shoff
    out.extend_from_slice(&0u32.to_le_bytes()); // e_flags
    out.extend_from_slice(&(EHSIZE as u16).to_le_bytes()); // e_ehsize
    out.extend_from_slice(&0u16.to_le_bytes()); // e_phentsize
    out.extend_from_slice(&0u16.to_le_bytes()); // e_phnum
    out.extend_from_slice(&(SHENTSIZE as u16).to_le_bytes()); // e_shentsize
    out.extend_from_slice(&3u16.to_le_bytes()); // e_shnum
    out.extend_from_slice(&2u16.to_le_bytes()); // e_shstrndx
    debug_assert_eq!(out.len(), EHSIZE);

    out.extend_from_slice(text);
    out.extend_from_slice(shstrtab);
    out.resize(shoff, 0);

    let mut shdr = |name: u32, sh_type: u32, flags: u64, offset: u64, size: u64| {
        out.extend_from_slice(&name.to_le_bytes());
        out.extend_from_slice(&sh_type.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes()); // sh_addr
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&size.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes()); // sh_link
        out.extend_from_slice(&0u32.to_le_bytes()); // sh_info
        out.extend_from_slice(&1u64.to_le_bytes()); // sh_addralign
        out.extend_from_slice(&0u64.to_le_bytes()); // sh_entsize
    };
    shdr(0, 0, 0, 0, 0); // SHT_NULL
    shdr(1, 1, 0x6, text_off as u64, text.len() as u64); // .text: SHT_PROGBITS, ALLOC|EXECINSTR
    shdr(7, 3, 0, strtab_off as u64, shstrtab.len() as u64); // .shstrtab: SHT_STRTAB
    out
}

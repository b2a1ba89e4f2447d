//! Two-pass assembler for the supported RV64 subset.
//!
//! The dialect is a minimal standard-style one: `label:` definitions,
//! instructions with x-register or ABI register names, and the directives
//! `.org`, `.dword`, `.zero` and `.equ`. Absolute addressing only, no
//! macros, no relocation. Pass 1 assigns addresses and collects symbols,
//! pass 2 encodes.
//!
//! `li`/`la` expansions are deterministic: a literal (or an `.equ` symbol
//! already defined above the use) gets the shortest of three shapes, while
//! a label reference always uses the fixed full-width shape so pass 1 knows
//! its size without resolving the label.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::isa::{self, Instruction, Op, FENCE_WORD};
use crate::mem::{MemoryImage, Segment};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError {
        line,
        msg: msg.into(),
    })
}

const ABI_NAMES: &[(&str, u8)] = &[
    ("zero", 0),
    ("ra", 1),
    ("sp", 2),
    ("gp", 3),
    ("tp", 4),
    ("t0", 5),
    ("t1", 6),
    ("t2", 7),
    ("s0", 8),
    ("fp", 8),
    ("s1", 9),
    ("a0", 10),
    ("a1", 11),
    ("a2", 12),
    ("a3", 13),
    ("a4", 14),
    ("a5", 15),
    ("a6", 16),
    ("a7", 17),
    ("s2", 18),
    ("s3", 19),
    ("s4", 20),
    ("s5", 21),
    ("s6", 22),
    ("s7", 23),
    ("s8", 24),
    ("s9", 25),
    ("s10", 26),
    ("s11", 27),
    ("t3", 28),
    ("t4", 29),
    ("t5", 30),
    ("t6", 31),
];

fn parse_reg(tok: &str) -> Option<u8> {
    if let Some(rest) = tok.strip_prefix('x') {
        if let Ok(n) = rest.parse::<u8>() {
            if n < 32 && (rest.len() == 1 || !rest.starts_with('0')) {
                return Some(n);
            }
        }
    }
    ABI_NAMES.iter().find(|(n, _)| *n == tok).map(|(_, r)| *r)
}

fn parse_number(tok: &str) -> Option<i64> {
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else if let Some(bin) = body.strip_prefix("0b") {
        u64::from_str_radix(&bin.replace('_', ""), 2).ok()?
    } else {
        body.replace('_', "").parse::<u64>().ok()?
    };
    let value = value as i64;
    Some(if neg { value.wrapping_neg() } else { value })
}

/// Symbol reference or literal.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Operand {
    Number(i64),
    Symbol(String),
}

impl Operand {
    fn parse(tok: &str) -> Operand {
        match parse_number(tok) {
            Some(n) => Operand::Number(n),
            None => Operand::Symbol(tok.to_string()),
        }
    }
}

/// The three deterministic `li` shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LiShape {
    /// `addi rd, x0, v`
    Imm12,
    /// `lui` + `addiw`
    Imm32,
    /// `addi` + 5 x (`slli` + `ori`), valid for any 64-bit constant.
    Wide,
}

impl LiShape {
    fn pick(value: i64) -> LiShape {
        if (-2048..=2047).contains(&value) {
            LiShape::Imm12
        } else if i32::try_from(value).is_ok() {
            LiShape::Imm32
        } else {
            LiShape::Wide
        }
    }

    fn len_bytes(self) -> u64 {
        match self {
            LiShape::Imm12 => 4,
            LiShape::Imm32 => 8,
            LiShape::Wide => 44,
        }
    }

    fn emit_words(self, rd: u8, value: i64) -> Vec<u32> {
        match self {
            LiShape::Imm12 => vec![Instruction::new(Op::Addi, rd, 0, 0, value).raw],
            LiShape::Imm32 => {
                let lo12 = ((value as i32) << 20) >> 20;
                let hi20 = (value as i32).wrapping_sub(lo12) >> 12;
                vec![
                    Instruction::new(Op::Lui, rd, 0, 0, hi20 as i64).raw,
                    Instruction::new(Op::Addiw, rd, rd, 0, lo12 as i64).raw,
                ]
            }
            LiShape::Wide => {
                let v = value as u64;
                let mut words = vec![Instruction::new(Op::Addi, rd, 0, 0, (v >> 55) as i64).raw];
                for k in (0..5).rev() {
                    words.push(Instruction::new(Op::Slli, rd, rd, 0, 11).raw);
                    words.push(
                        Instruction::new(Op::Ori, rd, rd, 0, ((v >> (11 * k)) & 0x7ff) as i64)
                            .raw,
                    );
                }
                words
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Stmt {
    Insn {
        op: Op,
        rd: u8,
        rs1: u8,
        rs2: u8,
        imm: Operand,
    },
    Li {
        rd: u8,
        value: Operand,
        shape: LiShape,
    },
    Dword(Operand),
    Zero(u64),
}

#[derive(Debug)]
struct Placed {
    line: usize,
    addr: u64,
    stmt: Stmt,
}

struct Parser {
    symbols: BTreeMap<String, u64>,
    equs: BTreeMap<String, i64>,
    placed: Vec<Placed>,
    addr: u64,
}

fn split_operands(rest: &str) -> Vec<String> {
    rest.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Splits `imm(reg)` into (imm-token, reg). The imm part may be empty.
fn split_mem_operand(tok: &str, line: usize) -> Result<(String, u8), AsmError> {
    let open = match tok.find('(') {
        Some(i) => i,
        None => return err(line, format!("expected imm(reg), got `{tok}`")),
    };
    if !tok.ends_with(')') {
        return err(line, format!("expected imm(reg), got `{tok}`"));
    }
    let imm = tok[..open].trim();
    let reg = tok[open + 1..tok.len() - 1].trim();
    let reg = parse_reg(reg).ok_or_else(|| AsmError {
        line,
        msg: format!("bad register `{reg}`"),
    })?;
    let imm = if imm.is_empty() { "0" } else { imm };
    Ok((imm.to_string(), reg))
}

impl Parser {
    fn new() -> Self {
        Parser {
            symbols: BTreeMap::new(),
            equs: BTreeMap::new(),
            placed: Vec::new(),
            addr: crate::mem::RAM_BASE,
        }
    }

    fn reg(&self, tok: &str, line: usize) -> Result<u8, AsmError> {
        parse_reg(tok).ok_or_else(|| AsmError {
            line,
            msg: format!("bad register `{tok}`"),
        })
    }

    /// Resolves a token to a value usable during pass 1 (literals and
    /// symbols already defined above this line).
    fn early_value(&self, tok: &str) -> Option<i64> {
        match Operand::parse(tok) {
            Operand::Number(n) => Some(n),
            Operand::Symbol(s) => self
                .equs
                .get(&s)
                .copied()
                .or_else(|| self.symbols.get(&s).map(|a| *a as i64)),
        }
    }

    fn define_label(&mut self, name: &str, line: usize) -> Result<(), AsmError> {
        if self.symbols.contains_key(name) || self.equs.contains_key(name) {
            return err(line, format!("duplicate label `{name}`"));
        }
        self.symbols.insert(name.to_string(), self.addr);
        Ok(())
    }

    fn push(&mut self, line: usize, stmt: Stmt) -> Result<(), AsmError> {
        let size = match &stmt {
            Stmt::Insn { .. } => 4,
            Stmt::Li { shape, .. } => shape.len_bytes(),
            Stmt::Dword(_) => 8,
            Stmt::Zero(n) => *n,
        };
        if matches!(stmt, Stmt::Insn { .. } | Stmt::Li { .. }) && self.addr % 4 != 0 {
            return err(
                line,
                format!("instruction at unaligned address {:#x}", self.addr),
            );
        }
        self.placed.push(Placed {
            line,
            addr: self.addr,
            stmt,
        });
        self.addr += size;
        Ok(())
    }

    fn insn(
        &mut self,
        line: usize,
        op: Op,
        rd: u8,
        rs1: u8,
        rs2: u8,
        imm: Operand,
    ) -> Result<(), AsmError> {
        self.push(
            line,
            Stmt::Insn {
                op,
                rd,
                rs1,
                rs2,
                imm,
            },
        )
    }

    fn parse_line(&mut self, lineno: usize, raw: &str) -> Result<(), AsmError> {
        // Strip comments.
        let mut text = raw;
        for marker in ["#", ";", "//"] {
            if let Some(i) = text.find(marker) {
                text = &text[..i];
            }
        }
        let mut text = text.trim();

        // Leading labels.
        while let Some(colon) = text.find(':') {
            let head = text[..colon].trim();
            if head.is_empty() || head.contains(char::is_whitespace) {
                break;
            }
            self.define_label(head, lineno)?;
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            return Ok(());
        }

        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let ops = split_operands(rest);
        let expect = |n: usize| -> Result<(), AsmError> {
            if ops.len() != n {
                return err(
                    lineno,
                    format!("{mnemonic} expects {n} operands, got {}", ops.len()),
                );
            }
            Ok(())
        };

        match mnemonic {
            ".org" => {
                expect(1)?;
                let addr = self.early_value(&ops[0]).ok_or_else(|| AsmError {
                    line: lineno,
                    msg: format!("`.org` needs a known value, got `{}`", ops[0]),
                })?;
                self.addr = addr as u64;
                return Ok(());
            }
            ".equ" => {
                expect(2)?;
                let value = self.early_value(&ops[1]).ok_or_else(|| AsmError {
                    line: lineno,
                    msg: format!("`.equ` needs a known value, got `{}`", ops[1]),
                })?;
                if self.symbols.contains_key(&ops[0]) || self.equs.contains_key(&ops[0]) {
                    return err(lineno, format!("duplicate symbol `{}`", ops[0]));
                }
                self.equs.insert(ops[0].clone(), value);
                return Ok(());
            }
            ".dword" => {
                expect(1)?;
                return self.push(lineno, Stmt::Dword(Operand::parse(&ops[0])));
            }
            ".zero" => {
                expect(1)?;
                let n = self.early_value(&ops[0]).ok_or_else(|| AsmError {
                    line: lineno,
                    msg: format!("`.zero` needs a known value, got `{}`", ops[0]),
                })?;
                return self.push(lineno, Stmt::Zero(n as u64));
            }
            _ => {}
        }

        use Op::*;
        match mnemonic {
            // Pseudo-instructions.
            "nop" => self.insn(lineno, Addi, 0, 0, 0, Operand::Number(0)),
            "mv" => {
                expect(2)?;
                let rd = self.reg(&ops[0], lineno)?;
                let rs = self.reg(&ops[1], lineno)?;
                self.insn(lineno, Addi, rd, rs, 0, Operand::Number(0))
            }
            "j" => {
                expect(1)?;
                self.insn(lineno, Jal, 0, 0, 0, Operand::parse(&ops[0]))
            }
            "ret" => self.insn(lineno, Jalr, 0, 1, 0, Operand::Number(0)),
            "li" | "la" => {
                expect(2)?;
                let rd = self.reg(&ops[0], lineno)?;
                let value = Operand::parse(&ops[1]);
                let shape = match (&value, mnemonic) {
                    (Operand::Symbol(s), "li") => match self.equs.get(s) {
                        Some(v) => LiShape::pick(*v),
                        None => LiShape::Wide,
                    },
                    (Operand::Symbol(_), _) => LiShape::Wide,
                    (Operand::Number(v), _) => LiShape::pick(*v),
                };
                self.push(lineno, Stmt::Li { rd, value, shape })
            }
            "csrr" => {
                expect(2)?;
                let rd = self.reg(&ops[0], lineno)?;
                let csr = self.csr_operand(&ops[1]);
                self.insn(lineno, Csrrs, rd, 0, 0, csr)
            }
            "csrw" => {
                expect(2)?;
                let rs = self.reg(&ops[1], lineno)?;
                let csr = self.csr_operand(&ops[0]);
                self.insn(lineno, Csrrw, 0, rs, 0, csr)
            }
            "csrs" | "csrc" => {
                expect(2)?;
                let op = if mnemonic == "csrs" { Csrrs } else { Csrrc };
                let rs = self.reg(&ops[1], lineno)?;
                let csr = self.csr_operand(&ops[0]);
                self.insn(lineno, op, 0, rs, 0, csr)
            }

            // Directly encoded instructions.
            "lui" | "auipc" => {
                expect(2)?;
                let op = if mnemonic == "lui" { Lui } else { Auipc };
                let rd = self.reg(&ops[0], lineno)?;
                self.insn(lineno, op, rd, 0, 0, Operand::parse(&ops[1]))
            }
            "jal" => {
                expect(2)?;
                let rd = self.reg(&ops[0], lineno)?;
                self.insn(lineno, Jal, rd, 0, 0, Operand::parse(&ops[1]))
            }
            "jalr" => {
                expect(2)?;
                let rd = self.reg(&ops[0], lineno)?;
                let (imm, rs1) = split_mem_operand(&ops[1], lineno)?;
                self.insn(lineno, Jalr, rd, rs1, 0, Operand::parse(&imm))
            }
            "beq" | "bne" | "blt" | "bge" | "bltu" | "bgeu" => {
                expect(3)?;
                let op = match mnemonic {
                    "beq" => Beq,
                    "bne" => Bne,
                    "blt" => Blt,
                    "bge" => Bge,
                    "bltu" => Bltu,
                    _ => Bgeu,
                };
                let rs1 = self.reg(&ops[0], lineno)?;
                let rs2 = self.reg(&ops[1], lineno)?;
                self.insn(lineno, op, 0, rs1, rs2, Operand::parse(&ops[2]))
            }
            "lb" | "lh" | "lw" | "ld" | "lbu" | "lhu" | "lwu" => {
                expect(2)?;
                let op = match mnemonic {
                    "lb" => Lb,
                    "lh" => Lh,
                    "lw" => Lw,
                    "ld" => Ld,
                    "lbu" => Lbu,
                    "lhu" => Lhu,
                    _ => Lwu,
                };
                let rd = self.reg(&ops[0], lineno)?;
                let (imm, rs1) = split_mem_operand(&ops[1], lineno)?;
                self.insn(lineno, op, rd, rs1, 0, Operand::parse(&imm))
            }
            "sb" | "sh" | "sw" | "sd" => {
                expect(2)?;
                let op = match mnemonic {
                    "sb" => Sb,
                    "sh" => Sh,
                    "sw" => Sw,
                    _ => Sd,
                };
                let rs2 = self.reg(&ops[0], lineno)?;
                let (imm, rs1) = split_mem_operand(&ops[1], lineno)?;
                self.insn(lineno, op, 0, rs1, rs2, Operand::parse(&imm))
            }
            "addi" | "slti" | "sltiu" | "xori" | "ori" | "andi" | "slli" | "srli" | "srai"
            | "addiw" | "slliw" | "srliw" | "sraiw" => {
                expect(3)?;
                let op = match mnemonic {
                    "addi" => Addi,
                    "slti" => Slti,
                    "sltiu" => Sltiu,
                    "xori" => Xori,
                    "ori" => Ori,
                    "andi" => Andi,
                    "slli" => Slli,
                    "srli" => Srli,
                    "srai" => Srai,
                    "addiw" => Addiw,
                    "slliw" => Slliw,
                    "srliw" => Srliw,
                    _ => Sraiw,
                };
                let rd = self.reg(&ops[0], lineno)?;
                let rs1 = self.reg(&ops[1], lineno)?;
                self.insn(lineno, op, rd, rs1, 0, Operand::parse(&ops[2]))
            }
            "add" | "sub" | "sll" | "slt" | "sltu" | "xor" | "srl" | "sra" | "or" | "and"
            | "addw" | "subw" | "sllw" | "srlw" | "sraw" => {
                expect(3)?;
                let op = match mnemonic {
                    "add" => Add,
                    "sub" => Sub,
                    "sll" => Sll,
                    "slt" => Slt,
                    "sltu" => Sltu,
                    "xor" => Xor,
                    "srl" => Srl,
                    "sra" => Sra,
                    "or" => Or,
                    "and" => And,
                    "addw" => Addw,
                    "subw" => Subw,
                    "sllw" => Sllw,
                    "srlw" => Srlw,
                    _ => Sraw,
                };
                let rd = self.reg(&ops[0], lineno)?;
                let rs1 = self.reg(&ops[1], lineno)?;
                let rs2 = self.reg(&ops[2], lineno)?;
                self.insn(lineno, op, rd, rs1, rs2, Operand::Number(0))
            }
            "fence" => self.insn(lineno, Fence, 0, 0, 0, Operand::Number(0)),
            "ecall" => self.insn(lineno, Ecall, 0, 0, 0, Operand::Number(0)),
            "ebreak" => self.insn(lineno, Ebreak, 0, 0, 0, Operand::Number(0)),
            "mret" => self.insn(lineno, Mret, 0, 0, 0, Operand::Number(0)),
            "sret" => self.insn(lineno, Sret, 0, 0, 0, Operand::Number(0)),
            "wfi" => self.insn(lineno, Wfi, 0, 0, 0, Operand::Number(0)),
            "sfence.vma" => {
                if ops.is_empty() {
                    self.insn(lineno, SfenceVma, 0, 0, 0, Operand::Number(0))
                } else {
                    expect(2)?;
                    let rs1 = self.reg(&ops[0], lineno)?;
                    let rs2 = self.reg(&ops[1], lineno)?;
                    self.insn(lineno, SfenceVma, 0, rs1, rs2, Operand::Number(0))
                }
            }
            "csrrw" | "csrrs" | "csrrc" => {
                expect(3)?;
                let op = match mnemonic {
                    "csrrw" => Csrrw,
                    "csrrs" => Csrrs,
                    _ => Csrrc,
                };
                let rd = self.reg(&ops[0], lineno)?;
                let rs1 = self.reg(&ops[2], lineno)?;
                let csr = self.csr_operand(&ops[1]);
                self.insn(lineno, op, rd, rs1, 0, csr)
            }
            "csrrwi" | "csrrsi" | "csrrci" => {
                expect(3)?;
                let op = match mnemonic {
                    "csrrwi" => Csrrwi,
                    "csrrsi" => Csrrsi,
                    _ => Csrrci,
                };
                let rd = self.reg(&ops[0], lineno)?;
                let zimm = match self.early_value(&ops[2]) {
                    Some(v) if (0..32).contains(&v) => v as u8,
                    _ => return err(lineno, format!("bad zimm `{}`", ops[2])),
                };
                let csr = self.csr_operand(&ops[1]);
                self.insn(lineno, op, rd, zimm, 0, csr)
            }
            other => err(lineno, format!("unknown mnemonic `{other}`")),
        }
    }

    fn csr_operand(&self, tok: &str) -> Operand {
        match isa::csr_addr(tok) {
            Some(addr) => Operand::Number(addr as i64),
            None => Operand::parse(tok),
        }
    }

    fn resolve(&self, operand: &Operand, line: usize) -> Result<i64, AsmError> {
        match operand {
            Operand::Number(n) => Ok(*n),
            Operand::Symbol(s) => self
                .equs
                .get(s)
                .copied()
                .or_else(|| self.symbols.get(s).map(|a| *a as i64))
                .ok_or_else(|| AsmError {
                    line,
                    msg: format!("undefined symbol `{s}`"),
                }),
        }
    }

    fn encode(&self) -> Result<Vec<(u64, Vec<u8>)>, AsmError> {
        let mut chunks: Vec<(u64, Vec<u8>)> = Vec::new();
        let mut push_bytes = |addr: u64, bytes: &[u8]| {
            match chunks.last_mut() {
                Some((start, buf)) if *start + buf.len() as u64 == addr => {
                    buf.extend_from_slice(bytes)
                }
                _ => chunks.push((addr, bytes.to_vec())),
            };
        };

        for placed in &self.placed {
            let line = placed.line;
            match &placed.stmt {
                Stmt::Zero(n) => push_bytes(placed.addr, &vec![0u8; *n as usize]),
                Stmt::Dword(operand) => {
                    let v = self.resolve(operand, line)? as u64;
                    push_bytes(placed.addr, &v.to_le_bytes());
                }
                Stmt::Li { rd, value, shape } => {
                    let v = self.resolve(value, line)?;
                    if LiShape::pick(v).len_bytes() > shape.len_bytes() {
                        return err(line, format!("li value {v:#x} does not fit chosen shape"));
                    }
                    let bytes: Vec<u8> = shape
                        .emit_words(*rd, v)
                        .iter()
                        .flat_map(|w| w.to_le_bytes())
                        .collect();
                    push_bytes(placed.addr, &bytes);
                }
                Stmt::Insn {
                    op,
                    rd,
                    rs1,
                    rs2,
                    imm,
                } => {
                    let value = self.resolve(imm, line)?;
                    let word = self.encode_insn(placed, *op, *rd, *rs1, *rs2, imm, value)?;
                    push_bytes(placed.addr, &word.to_le_bytes());
                }
            }
        }
        Ok(chunks)
    }

    fn encode_insn(
        &self,
        placed: &Placed,
        op: Op,
        rd: u8,
        rs1: u8,
        rs2: u8,
        imm: &Operand,
        value: i64,
    ) -> Result<u32, AsmError> {
        use Op::*;
        let line = placed.line;
        let range = |v: i64, lo: i64, hi: i64, what: &str| -> Result<(), AsmError> {
            if v < lo || v > hi {
                return err(line, format!("{what} {v} out of range [{lo}, {hi}]"));
            }
            Ok(())
        };
        let imm_value = match op {
            Beq | Bne | Blt | Bge | Bltu | Bgeu | Jal => {
                // Symbols are absolute targets; numbers are already-relative
                // byte offsets.
                let offset = match imm {
                    Operand::Symbol(_) => value.wrapping_sub(placed.addr as i64),
                    Operand::Number(n) => *n,
                };
                if offset % 2 != 0 {
                    return err(line, format!("odd branch offset {offset}"));
                }
                if matches!(op, Jal) {
                    range(offset, -(1 << 20), (1 << 20) - 2, "jump offset")?;
                } else {
                    range(offset, -(1 << 12), (1 << 12) - 2, "branch offset")?;
                }
                offset
            }
            Lui | Auipc => {
                range(value, -(1 << 19), (1 << 20) - 1, "20-bit immediate")?;
                (value << 44) >> 44
            }
            Slli | Srli | Srai => {
                range(value, 0, 63, "shift amount")?;
                value
            }
            Slliw | Srliw | Sraiw => {
                range(value, 0, 31, "shift amount")?;
                value
            }
            Csrrw | Csrrs | Csrrc | Csrrwi | Csrrsi | Csrrci => {
                range(value, 0, 4095, "csr address")?;
                value
            }
            Addi | Slti | Sltiu | Xori | Ori | Andi | Addiw | Jalr | Lb | Lh | Lw | Ld | Lbu
            | Lhu | Lwu | Sb | Sh | Sw | Sd => {
                range(value, -2048, 2047, "12-bit immediate")?;
                value
            }
            Fence => return Ok(FENCE_WORD),
            _ => 0,
        };
        Ok(Instruction::new(op, rd, rs1, rs2, imm_value).raw)
    }
}

/// Assembles a source program into a [`MemoryImage`].
///
/// The entry point is the `_start` symbol when defined, the lowest segment
/// address otherwise.
pub fn assemble(src: &str) -> Result<MemoryImage, AsmError> {
    let mut parser = Parser::new();
    for (i, line) in src.lines().enumerate() {
        parser.parse_line(i + 1, line)?;
    }
    let chunks = parser.encode()?;
    let mut image = MemoryImage {
        entry: 0,
        segments: chunks
            .into_iter()
            .filter(|(_, bytes)| !bytes.is_empty())
            .map(|(addr, bytes)| Segment { addr, bytes })
            .collect(),
        symbols: parser.symbols.clone(),
    };
    image.normalize().map_err(|e| AsmError {
        line: 0,
        msg: e.to_string(),
    })?;
    image.entry = parser
        .symbols
        .get("_start")
        .copied()
        .or_else(|| image.segments.first().map(|s| s.addr))
        .unwrap_or(crate::mem::RAM_BASE);
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::disassemble;

    fn words(image: &MemoryImage) -> Vec<u32> {
        let seg = &image.segments[0];
        seg.bytes
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    #[test]
    fn nop_is_canonical() {
        let image = assemble("nop\n").unwrap();
        assert_eq!(words(&image), vec![0x00000013]);
    }

    #[test]
    fn forward_branch_to_label() {
        let src = "start:\n beq x5, x6, done\n nop\n done: nop\n";
        let image = assemble(src).unwrap();
        assert_eq!(words(&image)[0], 0x00628463); // offset +8
    }

    #[test]
    fn immediate_out_of_range_is_reported() {
        let e = assemble("addi x1, x0, 5000\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.msg.contains("out of range"));
    }

    #[test]
    fn duplicate_label_is_reported() {
        let e = assemble("a:\nnop\na:\n").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn unknown_mnemonic_is_reported() {
        let e = assemble("frobnicate x1, x2\n").unwrap_err();
        assert!(e.msg.contains("frobnicate"));
    }

    #[test]
    fn undefined_symbol_is_reported() {
        let e = assemble("j nowhere\n").unwrap_err();
        assert!(e.msg.contains("nowhere"));
    }

    #[test]
    fn org_splits_segments_and_overlap_fails() {
        let src = ".org 0x80000000\nnop\n.org 0x80001000\nnop\n";
        let image = assemble(src).unwrap();
        assert_eq!(image.segments.len(), 2);
        assert_eq!(image.segments[1].addr, 0x8000_1000);

        let bad = ".org 0x80000000\n.zero 16\n.org 0x80000008\nnop\n";
        assert!(assemble(bad).is_err());
    }

    #[test]
    fn equ_and_dword_resolve() {
        let src = ".equ MAGIC, 0x5afe\n.org 0x80000000\nv: .dword MAGIC\n.dword v\n";
        let image = assemble(src).unwrap();
        let seg = &image.segments[0];
        assert_eq!(&seg.bytes[0..8], &0x5afeu64.to_le_bytes());
        assert_eq!(&seg.bytes[8..16], &0x8000_0000u64.to_le_bytes());
    }

    #[test]
    fn entry_prefers_start_symbol() {
        let src = ".org 0x80000000\nnop\n_start: nop\n";
        let image = assemble(src).unwrap();
        assert_eq!(image.entry, 0x8000_0004);
    }

    #[test]
    fn li_shapes() {
        assert_eq!(words(&assemble("li t0, -7\n").unwrap()).len(), 1);
        assert_eq!(words(&assemble("li t0, 0x12345678\n").unwrap()).len(), 2);
        assert_eq!(
            words(&assemble("li t0, 0xdeadbeefcafef00d\n").unwrap()).len(),
            11
        );
        // Label references always use the wide shape.
        let src = "la t0, target\ntarget: nop\n";
        assert_eq!(words(&assemble(src).unwrap()).len(), 12);
    }

    #[test]
    fn csr_names_and_numeric_csrs() {
        let a = assemble("csrw mtvec, t0\n").unwrap();
        let b = assemble("csrw 0x305, t0\n").unwrap();
        assert_eq!(words(&a), words(&b));
    }

    #[test]
    fn disassemble_round_trips_through_assembler() {
        use crate::isa::Instruction;
        // Every supported-op word the disassembler prints must assemble
        // back to the same word.
        let samples = [
            Instruction::new(Op::Lui, 5, 0, 0, -12).raw,
            Instruction::new(Op::Auipc, 1, 0, 0, 0xfff).raw,
            Instruction::new(Op::Jal, 1, 0, 0, -16).raw,
            Instruction::new(Op::Jalr, 1, 7, 0, -3).raw,
            Instruction::new(Op::Beq, 0, 5, 6, 8).raw,
            Instruction::new(Op::Ld, 9, 2, 0, -64).raw,
            Instruction::new(Op::Sd, 0, 2, 9, 56).raw,
            Instruction::new(Op::Addi, 1, 2, 0, -2048).raw,
            Instruction::new(Op::Srai, 3, 4, 0, 63).raw,
            Instruction::new(Op::Sraw, 3, 4, 5, 0).raw,
            Instruction::new(Op::Csrrw, 1, 2, 0, 0x305).raw,
            Instruction::new(Op::Csrrwi, 1, 17, 0, 0x7c0).raw,
            Instruction::new(Op::SfenceVma, 0, 0, 0, 0).raw,
            Instruction::new(Op::Ecall, 0, 0, 0, 0).raw,
            FENCE_WORD,
        ];
        for word in samples {
            let text = disassemble(word, 0);
            let image = assemble(&format!("{text}\n")).unwrap();
            assert_eq!(words(&image), vec![word], "{text}");
        }
    }

    #[test]
    fn unsupported_word_renders_as_word_directive() {
        assert_eq!(disassemble(0xffffffff, 0), ".word 0xffffffff");
    }
}

//! Instruction definitions, decoding, encoding and disassembly for the
//! RV64I + Zicsr subset understood by the simulator.

use std::fmt;

/// Mnemonics of the supported subset.
///
/// RV64I base integer instructions, Zicsr, the privileged returns, `wfi`
/// (no-op) and `sfence.vma` (full TLB flush). `fence` decodes but acts as a
/// no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Lui,
    Auipc,
    Jal,
    Jalr,
    Beq,
    Bne,
    Blt,
    Bge,
    Bltu,
    Bgeu,
    Lb,
    Lh,
    Lw,
    Ld,
    Lbu,
    Lhu,
    Lwu,
    Sb,
    Sh,
    Sw,
    Sd,
    Addi,
    Slti,
    Sltiu,
    Xori,
    Ori,
    Andi,
    Slli,
    Srli,
    Srai,
    Add,
    Sub,
    Sll,
    Slt,
    Sltu,
    Xor,
    Srl,
    Sra,
    Or,
    And,
    Addiw,
    Slliw,
    Srliw,
    Sraiw,
    Addw,
    Subw,
    Sllw,
    Srlw,
    Sraw,
    Fence,
    Ecall,
    Ebreak,
    Csrrw,
    Csrrs,
    Csrrc,
    Csrrwi,
    Csrrsi,
    Csrrci,
    Mret,
    Sret,
    Wfi,
    SfenceVma,
}

/// A decoded instruction.
///
/// Unused operand fields are zero so that `decode(encode(i)) == i` holds
/// structurally. `imm` carries the sign-extended immediate; for CSR
/// instructions it holds the CSR address (zero-extended 12 bits) and for the
/// register-immediate CSR forms `rs1` holds the 5-bit zimm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub op: Op,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i64,
    pub raw: u32,
}

/// Word that does not decode to any supported instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IllegalInstruction(pub u32);

impl fmt::Display for IllegalInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "illegal instruction word {:#010x}", self.0)
    }
}

const OPC_LUI: u32 = 0b0110111;
const OPC_AUIPC: u32 = 0b0010111;
const OPC_JAL: u32 = 0b1101111;
const OPC_JALR: u32 = 0b1100111;
const OPC_BRANCH: u32 = 0b1100011;
const OPC_LOAD: u32 = 0b0000011;
const OPC_STORE: u32 = 0b0100011;
const OPC_OP_IMM: u32 = 0b0010011;
const OPC_OP: u32 = 0b0110011;
const OPC_OP_IMM_32: u32 = 0b0011011;
const OPC_OP_32: u32 = 0b0111011;
const OPC_MISC_MEM: u32 = 0b0001111;
const OPC_SYSTEM: u32 = 0b1110011;

/// Canonical `fence iorw, iorw` word.
pub const FENCE_WORD: u32 = 0x0ff0000f;
/// Canonical NOP (`addi x0, x0, 0`).
pub const NOP_WORD: u32 = 0x00000013;

impl Instruction {
    /// Builds an instruction from operand fields, computing the raw word.
    pub fn new(op: Op, rd: u8, rs1: u8, rs2: u8, imm: i64) -> Self {
        let mut inst = Instruction {
            op,
            rd,
            rs1,
            rs2,
            imm,
            raw: 0,
        };
        inst.raw = encode_fields(&inst);
        inst
    }

    /// Re-encodes the instruction from its operand fields.
    pub fn encode(&self) -> u32 {
        encode_fields(self)
    }
}

fn enc_r(funct7: u32, rs2: u8, rs1: u8, funct3: u32, rd: u8, opcode: u32) -> u32 {
    (funct7 << 25)
        | ((rs2 as u32) << 20)
        | ((rs1 as u32) << 15)
        | (funct3 << 12)
        | ((rd as u32) << 7)
        | opcode
}

fn enc_i(imm: i64, rs1: u8, funct3: u32, rd: u8, opcode: u32) -> u32 {
    (((imm as u32) & 0xfff) << 20)
        | ((rs1 as u32) << 15)
        | (funct3 << 12)
        | ((rd as u32) << 7)
        | opcode
}

fn enc_s(imm: i64, rs2: u8, rs1: u8, funct3: u32, opcode: u32) -> u32 {
    let imm = imm as u32;
    (((imm >> 5) & 0x7f) << 25)
        | ((rs2 as u32) << 20)
        | ((rs1 as u32) << 15)
        | (funct3 << 12)
        | ((imm & 0x1f) << 7)
        | opcode
}

fn enc_b(imm: i64, rs2: u8, rs1: u8, funct3: u32, opcode: u32) -> u32 {
    let imm = imm as u32;
    (((imm >> 12) & 1) << 31)
        | (((imm >> 5) & 0x3f) << 25)
        | ((rs2 as u32) << 20)
        | ((rs1 as u32) << 15)
        | (funct3 << 12)
        | (((imm >> 1) & 0xf) << 8)
        | (((imm >> 11) & 1) << 7)
        | opcode
}

fn enc_u(imm: i64, rd: u8, opcode: u32) -> u32 {
    (((imm as u32) & 0xfffff) << 12) | ((rd as u32) << 7) | opcode
}

fn enc_j(imm: i64, rd: u8, opcode: u32) -> u32 {
    let imm = imm as u32;
    (((imm >> 20) & 1) << 31)
        | (((imm >> 1) & 0x3ff) << 21)
        | (((imm >> 11) & 1) << 20)
        | (((imm >> 12) & 0xff) << 12)
        | ((rd as u32) << 7)
        | opcode
}

fn encode_fields(i: &Instruction) -> u32 {
    use Op::*;
    match i.op {
        Lui => enc_u(i.imm, i.rd, OPC_LUI),
        Auipc => enc_u(i.imm, i.rd, OPC_AUIPC),
        Jal => enc_j(i.imm, i.rd, OPC_JAL),
        Jalr => enc_i(i.imm, i.rs1, 0b000, i.rd, OPC_JALR),
        Beq => enc_b(i.imm, i.rs2, i.rs1, 0b000, OPC_BRANCH),
        Bne => enc_b(i.imm, i.rs2, i.rs1, 0b001, OPC_BRANCH),
        Blt => enc_b(i.imm, i.rs2, i.rs1, 0b100, OPC_BRANCH),
        Bge => enc_b(i.imm, i.rs2, i.rs1, 0b101, OPC_BRANCH),
        Bltu => enc_b(i.imm, i.rs2, i.rs1, 0b110, OPC_BRANCH),
        Bgeu => enc_b(i.imm, i.rs2, i.rs1, 0b111, OPC_BRANCH),
        Lb => enc_i(i.imm, i.rs1, 0b000, i.rd, OPC_LOAD),
        Lh => enc_i(i.imm, i.rs1, 0b001, i.rd, OPC_LOAD),
        Lw => enc_i(i.imm, i.rs1, 0b010, i.rd, OPC_LOAD),
        Ld => enc_i(i.imm, i.rs1, 0b011, i.rd, OPC_LOAD),
        Lbu => enc_i(i.imm, i.rs1, 0b100, i.rd, OPC_LOAD),
        Lhu => enc_i(i.imm, i.rs1, 0b101, i.rd, OPC_LOAD),
        Lwu => enc_i(i.imm, i.rs1, 0b110, i.rd, OPC_LOAD),
        Sb => enc_s(i.imm, i.rs2, i.rs1, 0b000, OPC_STORE),
        Sh => enc_s(i.imm, i.rs2, i.rs1, 0b001, OPC_STORE),
        Sw => enc_s(i.imm, i.rs2, i.rs1, 0b010, OPC_STORE),
        Sd => enc_s(i.imm, i.rs2, i.rs1, 0b011, OPC_STORE),
        Addi => enc_i(i.imm, i.rs1, 0b000, i.rd, OPC_OP_IMM),
        Slti => enc_i(i.imm, i.rs1, 0b010, i.rd, OPC_OP_IMM),
        Sltiu => enc_i(i.imm, i.rs1, 0b011, i.rd, OPC_OP_IMM),
        Xori => enc_i(i.imm, i.rs1, 0b100, i.rd, OPC_OP_IMM),
        Ori => enc_i(i.imm, i.rs1, 0b110, i.rd, OPC_OP_IMM),
        Andi => enc_i(i.imm, i.rs1, 0b111, i.rd, OPC_OP_IMM),
        Slli => enc_i(i.imm & 0x3f, i.rs1, 0b001, i.rd, OPC_OP_IMM),
        Srli => enc_i(i.imm & 0x3f, i.rs1, 0b101, i.rd, OPC_OP_IMM),
        Srai => enc_i((i.imm & 0x3f) | 0x400, i.rs1, 0b101, i.rd, OPC_OP_IMM),
        Add => enc_r(0b0000000, i.rs2, i.rs1, 0b000, i.rd, OPC_OP),
        Sub => enc_r(0b0100000, i.rs2, i.rs1, 0b000, i.rd, OPC_OP),
        Sll => enc_r(0b0000000, i.rs2, i.rs1, 0b001, i.rd, OPC_OP),
        Slt => enc_r(0b0000000, i.rs2, i.rs1, 0b010, i.rd, OPC_OP),
        Sltu => enc_r(0b0000000, i.rs2, i.rs1, 0b011, i.rd, OPC_OP),
        Xor => enc_r(0b0000000, i.rs2, i.rs1, 0b100, i.rd, OPC_OP),
        Srl => enc_r(0b0000000, i.rs2, i.rs1, 0b101, i.rd, OPC_OP),
        Sra => enc_r(0b0100000, i.rs2, i.rs1, 0b101, i.rd, OPC_OP),
        Or => enc_r(0b0000000, i.rs2, i.rs1, 0b110, i.rd, OPC_OP),
        And => enc_r(0b0000000, i.rs2, i.rs1, 0b111, i.rd, OPC_OP),
        Addiw => enc_i(i.imm, i.rs1, 0b000, i.rd, OPC_OP_IMM_32),
        Slliw => enc_i(i.imm & 0x1f, i.rs1, 0b001, i.rd, OPC_OP_IMM_32),
        Srliw => enc_i(i.imm & 0x1f, i.rs1, 0b101, i.rd, OPC_OP_IMM_32),
        Sraiw => enc_i((i.imm & 0x1f) | 0x400, i.rs1, 0b101, i.rd, OPC_OP_IMM_32),
        Addw => enc_r(0b0000000, i.rs2, i.rs1, 0b000, i.rd, OPC_OP_32),
        Subw => enc_r(0b0100000, i.rs2, i.rs1, 0b000, i.rd, OPC_OP_32),
        Sllw => enc_r(0b0000000, i.rs2, i.rs1, 0b001, i.rd, OPC_OP_32),
        Srlw => enc_r(0b0000000, i.rs2, i.rs1, 0b101, i.rd, OPC_OP_32),
        Sraw => enc_r(0b0100000, i.rs2, i.rs1, 0b101, i.rd, OPC_OP_32),
        Fence => enc_i(i.imm, i.rs1, 0b000, i.rd, OPC_MISC_MEM),
        Ecall => OPC_SYSTEM,
        Ebreak => enc_i(1, 0, 0b000, 0, OPC_SYSTEM),
        Mret => enc_i(0x302, 0, 0b000, 0, OPC_SYSTEM),
        Sret => enc_i(0x102, 0, 0b000, 0, OPC_SYSTEM),
        Wfi => enc_i(0x105, 0, 0b000, 0, OPC_SYSTEM),
        SfenceVma => enc_r(0b0001001, i.rs2, i.rs1, 0b000, 0, OPC_SYSTEM),
        Csrrw => enc_i(i.imm, i.rs1, 0b001, i.rd, OPC_SYSTEM),
        Csrrs => enc_i(i.imm, i.rs1, 0b010, i.rd, OPC_SYSTEM),
        Csrrc => enc_i(i.imm, i.rs1, 0b011, i.rd, OPC_SYSTEM),
        Csrrwi => enc_i(i.imm, i.rs1, 0b101, i.rd, OPC_SYSTEM),
        Csrrsi => enc_i(i.imm, i.rs1, 0b110, i.rd, OPC_SYSTEM),
        Csrrci => enc_i(i.imm, i.rs1, 0b111, i.rd, OPC_SYSTEM),
    }
}

fn sext(value: u32, bits: u32) -> i64 {
    let shift = 64 - bits;
    (((value as u64) << shift) as i64) >> shift
}

fn dec_i_imm(word: u32) -> i64 {
    sext(word >> 20, 12)
}

fn dec_s_imm(word: u32) -> i64 {
    sext(((word >> 25) << 5) | ((word >> 7) & 0x1f), 12)
}

fn dec_b_imm(word: u32) -> i64 {
    let imm = (((word >> 31) & 1) << 12)
        | (((word >> 7) & 1) << 11)
        | (((word >> 25) & 0x3f) << 5)
        | (((word >> 8) & 0xf) << 1);
    sext(imm, 13)
}

fn dec_u_imm(word: u32) -> i64 {
    sext(word >> 12, 20)
}

fn dec_j_imm(word: u32) -> i64 {
    let imm = (((word >> 31) & 1) << 20)
        | (((word >> 12) & 0xff) << 12)
        | (((word >> 20) & 1) << 11)
        | (((word >> 21) & 0x3ff) << 1);
    sext(imm, 21)
}

/// Decodes a 32-bit word into the supported subset.
pub fn decode(word: u32) -> Result<Instruction, IllegalInstruction> {
    use Op::*;
    let opcode = word & 0x7f;
    let rd = ((word >> 7) & 0x1f) as u8;
    let funct3 = (word >> 12) & 0x7;
    let rs1 = ((word >> 15) & 0x1f) as u8;
    let rs2 = ((word >> 20) & 0x1f) as u8;
    let funct7 = word >> 25;
    let ill = Err(IllegalInstruction(word));

    let inst = |op: Op, rd: u8, rs1: u8, rs2: u8, imm: i64| Instruction {
        op,
        rd,
        rs1,
        rs2,
        imm,
        raw: word,
    };

    let decoded = match opcode {
        OPC_LUI => inst(Lui, rd, 0, 0, dec_u_imm(word)),
        OPC_AUIPC => inst(Auipc, rd, 0, 0, dec_u_imm(word)),
        OPC_JAL => inst(Jal, rd, 0, 0, dec_j_imm(word)),
        OPC_JALR => {
            if funct3 != 0 {
                return ill;
            }
            inst(Jalr, rd, rs1, 0, dec_i_imm(word))
        }
        OPC_BRANCH => {
            let op = match funct3 {
                0b000 => Beq,
                0b001 => Bne,
                0b100 => Blt,
                0b101 => Bge,
                0b110 => Bltu,
                0b111 => Bgeu,
                _ => return ill,
            };
            inst(op, 0, rs1, rs2, dec_b_imm(word))
        }
        OPC_LOAD => {
            let op = match funct3 {
                0b000 => Lb,
                0b001 => Lh,
                0b010 => Lw,
                0b011 => Ld,
                0b100 => Lbu,
                0b101 => Lhu,
                0b110 => Lwu,
                _ => return ill,
            };
            inst(op, rd, rs1, 0, dec_i_imm(word))
        }
        OPC_STORE => {
            let op = match funct3 {
                0b000 => Sb,
                0b001 => Sh,
                0b010 => Sw,
                0b011 => Sd,
                _ => return ill,
            };
            inst(op, 0, rs1, rs2, dec_s_imm(word))
        }
        OPC_OP_IMM => match funct3 {
            0b000 => inst(Addi, rd, rs1, 0, dec_i_imm(word)),
            0b010 => inst(Slti, rd, rs1, 0, dec_i_imm(word)),
            0b011 => inst(Sltiu, rd, rs1, 0, dec_i_imm(word)),
            0b100 => inst(Xori, rd, rs1, 0, dec_i_imm(word)),
            0b110 => inst(Ori, rd, rs1, 0, dec_i_imm(word)),
            0b111 => inst(Andi, rd, rs1, 0, dec_i_imm(word)),
            0b001 => {
                if funct7 >> 1 != 0 {
                    return ill;
                }
                inst(Slli, rd, rs1, 0, ((word >> 20) & 0x3f) as i64)
            }
            0b101 => match funct7 >> 1 {
                0b000000 => inst(Srli, rd, rs1, 0, ((word >> 20) & 0x3f) as i64),
                0b010000 => inst(Srai, rd, rs1, 0, ((word >> 20) & 0x3f) as i64),
                _ => return ill,
            },
            _ => return ill,
        },
        OPC_OP => {
            let op = match (funct7, funct3) {
                (0b0000000, 0b000) => Add,
                (0b0100000, 0b000) => Sub,
                (0b0000000, 0b001) => Sll,
                (0b0000000, 0b010) => Slt,
                (0b0000000, 0b011) => Sltu,
                (0b0000000, 0b100) => Xor,
                (0b0000000, 0b101) => Srl,
                (0b0100000, 0b101) => Sra,
                (0b0000000, 0b110) => Or,
                (0b0000000, 0b111) => And,
                _ => return ill,
            };
            inst(op, rd, rs1, rs2, 0)
        }
        OPC_OP_IMM_32 => match funct3 {
            0b000 => inst(Addiw, rd, rs1, 0, dec_i_imm(word)),
            0b001 => {
                if funct7 != 0 {
                    return ill;
                }
                inst(Slliw, rd, rs1, 0, ((word >> 20) & 0x1f) as i64)
            }
            0b101 => match funct7 {
                0b0000000 => inst(Srliw, rd, rs1, 0, ((word >> 20) & 0x1f) as i64),
                0b0100000 => inst(Sraiw, rd, rs1, 0, ((word >> 20) & 0x1f) as i64),
                _ => return ill,
            },
            _ => return ill,
        },
        OPC_OP_32 => {
            let op = match (funct7, funct3) {
                (0b0000000, 0b000) => Addw,
                (0b0100000, 0b000) => Subw,
                (0b0000000, 0b001) => Sllw,
                (0b0000000, 0b101) => Srlw,
                (0b0100000, 0b101) => Sraw,
                _ => return ill,
            };
            inst(op, rd, rs1, rs2, 0)
        }
        OPC_MISC_MEM => {
            if funct3 != 0 {
                return ill;
            }
            inst(Fence, rd, rs1, 0, ((word >> 20) & 0xfff) as i64)
        }
        OPC_SYSTEM => match funct3 {
            0b000 => {
                if rd != 0 {
                    return ill;
                }
                match word >> 20 {
                    0x000 if rs1 == 0 => inst(Ecall, 0, 0, 0, 0),
                    0x001 if rs1 == 0 => inst(Ebreak, 0, 0, 0, 0),
                    0x302 if rs1 == 0 => inst(Mret, 0, 0, 0, 0),
                    0x102 if rs1 == 0 => inst(Sret, 0, 0, 0, 0),
                    0x105 if rs1 == 0 => inst(Wfi, 0, 0, 0, 0),
                    _ if funct7 == 0b0001001 => inst(SfenceVma, 0, rs1, rs2, 0),
                    _ => return ill,
                }
            }
            0b001 => inst(Csrrw, rd, rs1, 0, ((word >> 20) & 0xfff) as i64),
            0b010 => inst(Csrrs, rd, rs1, 0, ((word >> 20) & 0xfff) as i64),
            0b011 => inst(Csrrc, rd, rs1, 0, ((word >> 20) & 0xfff) as i64),
            0b101 => inst(Csrrwi, rd, rs1, 0, ((word >> 20) & 0xfff) as i64),
            0b110 => inst(Csrrsi, rd, rs1, 0, ((word >> 20) & 0xfff) as i64),
            0b111 => inst(Csrrci, rd, rs1, 0, ((word >> 20) & 0xfff) as i64),
            _ => return ill,
        },
        _ => return ill,
    };
    Ok(decoded)
}

impl Op {
    /// Assembly mnemonic.
    pub fn mnemonic(&self) -> &'static str {
        use Op::*;
        match self {
            Lui => "lui",
            Auipc => "auipc",
            Jal => "jal",
            Jalr => "jalr",
            Beq => "beq",
            Bne => "bne",
            Blt => "blt",
            Bge => "bge",
            Bltu => "bltu",
            Bgeu => "bgeu",
            Lb => "lb",
            Lh => "lh",
            Lw => "lw",
            Ld => "ld",
            Lbu => "lbu",
            Lhu => "lhu",
            Lwu => "lwu",
            Sb => "sb",
            Sh => "sh",
            Sw => "sw",
            Sd => "sd",
            Addi => "addi",
            Slti => "slti",
            Sltiu => "sltiu",
            Xori => "xori",
            Ori => "ori",
            Andi => "andi",
            Slli => "slli",
            Srli => "srli",
            Srai => "srai",
            Add => "add",
            Sub => "sub",
            Sll => "sll",
            Slt => "slt",
            Sltu => "sltu",
            Xor => "xor",
            Srl => "srl",
            Sra => "sra",
            Or => "or",
            And => "and",
            Addiw => "addiw",
            Slliw => "slliw",
            Srliw => "srliw",
            Sraiw => "sraiw",
            Addw => "addw",
            Subw => "subw",
            Sllw => "sllw",
            Srlw => "srlw",
            Sraw => "sraw",
            Fence => "fence",
            Ecall => "ecall",
            Ebreak => "ebreak",
            Csrrw => "csrrw",
            Csrrs => "csrrs",
            Csrrc => "csrrc",
            Csrrwi => "csrrwi",
            Csrrsi => "csrrsi",
            Csrrci => "csrrci",
            Mret => "mret",
            Sret => "sret",
            Wfi => "wfi",
            SfenceVma => "sfence.vma",
        }
    }
}

/// Well-known CSR names, used by the assembler and disassembler.
pub const CSR_NAMES: &[(&str, u16)] = &[
    ("sstatus", 0x100),
    ("sie", 0x104),
    ("stvec", 0x105),
    ("sscratch", 0x140),
    ("sepc", 0x141),
    ("scause", 0x142),
    ("stval", 0x143),
    ("sip", 0x144),
    ("satp", 0x180),
    ("mstatus", 0x300),
    ("medeleg", 0x302),
    ("mideleg", 0x303),
    ("mie", 0x304),
    ("mtvec", 0x305),
    ("mscratch", 0x340),
    ("mepc", 0x341),
    ("mcause", 0x342),
    ("mtval", 0x343),
    ("mip", 0x344),
    ("mtimecmp", 0x7c0),
    ("mcycle", 0xb00),
    ("time", 0xc01),
];

pub fn csr_name(addr: u16) -> Option<&'static str> {
    CSR_NAMES.iter().find(|(_, a)| *a == addr).map(|(n, _)| *n)
}

pub fn csr_addr(name: &str) -> Option<u16> {
    CSR_NAMES.iter().find(|(n, _)| *n == name).map(|(_, a)| *a)
}

fn fmt_csr(addr: i64) -> String {
    match csr_name(addr as u16) {
        Some(name) => name.to_string(),
        None => format!("{:#x}", addr),
    }
}

/// Renders a word as canonical assembly text.
///
/// Unsupported words render as a `.word` directive. Branch and jump targets
/// print as signed byte offsets relative to the instruction, which the
/// assembler accepts back, so `assemble(disassemble(w)) == w` for every
/// supported word.
pub fn disassemble(word: u32, _addr: u64) -> String {
    use Op::*;
    let i = match decode(word) {
        Ok(i) => i,
        Err(_) => return format!(".word {:#010x}", word),
    };
    match i.op {
        Lui | Auipc => format!("{} x{}, {}", i.op.mnemonic(), i.rd, i.imm),
        Jal => format!("jal x{}, {}", i.rd, i.imm),
        Jalr => format!("jalr x{}, {}(x{})", i.rd, i.imm, i.rs1),
        Beq | Bne | Blt | Bge | Bltu | Bgeu => {
            format!("{} x{}, x{}, {}", i.op.mnemonic(), i.rs1, i.rs2, i.imm)
        }
        Lb | Lh | Lw | Ld | Lbu | Lhu | Lwu => {
            format!("{} x{}, {}(x{})", i.op.mnemonic(), i.rd, i.imm, i.rs1)
        }
        Sb | Sh | Sw | Sd => format!("{} x{}, {}(x{})", i.op.mnemonic(), i.rs2, i.imm, i.rs1),
        Addi | Slti | Sltiu | Xori | Ori | Andi | Slli | Srli | Srai | Addiw | Slliw | Srliw
        | Sraiw => format!("{} x{}, x{}, {}", i.op.mnemonic(), i.rd, i.rs1, i.imm),
        Add | Sub | Sll | Slt | Sltu | Xor | Srl | Sra | Or | And | Addw | Subw | Sllw | Srlw
        | Sraw => format!("{} x{}, x{}, x{}", i.op.mnemonic(), i.rd, i.rs1, i.rs2),
        Fence => {
            if word == FENCE_WORD {
                "fence".to_string()
            } else {
                format!(".word {:#010x}", word)
            }
        }
        Ecall | Ebreak | Mret | Sret | Wfi => i.op.mnemonic().to_string(),
        SfenceVma => {
            if i.rs1 == 0 && i.rs2 == 0 {
                "sfence.vma".to_string()
            } else {
                format!("sfence.vma x{}, x{}", i.rs1, i.rs2)
            }
        }
        Csrrw | Csrrs | Csrrc => format!(
            "{} x{}, {}, x{}",
            i.op.mnemonic(),
            i.rd,
            fmt_csr(i.imm),
            i.rs1
        ),
        Csrrwi | Csrrsi | Csrrci => format!(
            "{} x{}, {}, {}",
            i.op.mnemonic(),
            i.rd,
            fmt_csr(i.imm),
            i.rs1
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_nop_decodes() {
        let i = decode(NOP_WORD).unwrap();
        assert_eq!(i.op, Op::Addi);
        assert_eq!((i.rd, i.rs1, i.imm), (0, 0, 0));
    }

    #[test]
    fn add_word_matches_hand_encoding() {
        // add x10, x10, x11 encoded by hand from the R-type format.
        let i = decode(0x00b50533).unwrap();
        assert_eq!(i.op, Op::Add);
        assert_eq!((i.rd, i.rs1, i.rs2), (10, 10, 11));
        assert_eq!(Instruction::new(Op::Add, 10, 10, 11, 0).raw, 0x00b50533);
    }

    #[test]
    fn beq_forward_eight_matches_hand_encoding() {
        // beq x5, x6, +8 encoded by hand from the B-type format.
        let i = Instruction::new(Op::Beq, 0, 5, 6, 8);
        assert_eq!(i.raw, 0x00628463);
        let d = decode(0x00628463).unwrap();
        assert_eq!(d.imm, 8);
    }

    #[test]
    fn all_ones_is_illegal() {
        assert_eq!(decode(0xffffffff), Err(IllegalInstruction(0xffffffff)));
    }

    #[test]
    fn negative_immediates_round_trip() {
        for imm in [-2048, -1, 0, 1, 2047] {
            let i = Instruction::new(Op::Addi, 3, 4, 0, imm);
            assert_eq!(decode(i.raw).unwrap(), i);
        }
        for imm in [-4096, -2, 0, 2, 4094] {
            let i = Instruction::new(Op::Bne, 0, 1, 2, imm);
            assert_eq!(decode(i.raw).unwrap(), i);
        }
        for imm in [-(1 << 20), -2, 0, 2, (1 << 20) - 2] {
            let i = Instruction::new(Op::Jal, 1, 0, 0, imm);
            assert_eq!(decode(i.raw).unwrap(), i);
        }
    }

    #[test]
    fn system_words_decode() {
        assert_eq!(decode(0x00000073).unwrap().op, Op::Ecall);
        assert_eq!(decode(0x30200073).unwrap().op, Op::Mret);
        assert_eq!(decode(0x10200073).unwrap().op, Op::Sret);
        assert_eq!(decode(0x10500073).unwrap().op, Op::Wfi);
        assert_eq!(decode(0x12000073).unwrap().op, Op::SfenceVma);
    }

    #[test]
    fn shift_amounts_use_six_bits() {
        let i = Instruction::new(Op::Srai, 7, 7, 0, 63);
        let d = decode(i.raw).unwrap();
        assert_eq!(d, i);
        assert_eq!(d.imm, 63);
    }
}

//! A small SSA-style intermediate representation.
//!
//! Programs are text: a list of globals and functions, one instruction per
//! line in canonical form, with explicit types on every operand. A `Program`
//! is immutable after construction and safe to share across threads; parsing,
//! validation, and printing are pure.

mod parse;
mod print;
mod validate;

pub use parse::parse_program;
pub use print::print_program;
pub use validate::validate;

use serde::{Deserialize, Serialize};

/// Scalar and pointer types usable in instructions. There is no floating
/// point in this IR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ty {
    I8,
    I16,
    I32,
    I64,
    I128,
    Ptr,
}

impl Ty {
    pub fn size(self) -> u64 {
        match self {
            Ty::I8 => 1,
            Ty::I16 => 2,
            Ty::I32 => 4,
            Ty::I64 | Ty::Ptr => 8,
            Ty::I128 => 16,
        }
    }

    pub fn bits(self) -> u32 {
        (self.size() * 8) as u32
    }

    /// Bit mask covering the value range of the type.
    pub fn mask(self) -> u128 {
        match self {
            Ty::I128 => u128::MAX,
            t => (1u128 << t.bits()) - 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ty::I8 => "i8",
            Ty::I16 => "i16",
            Ty::I32 => "i32",
            Ty::I64 => "i64",
            Ty::I128 => "i128",
            Ty::Ptr => "ptr",
        }
    }

    pub fn from_name(s: &str) -> Option<Ty> {
        Some(match s {
            "i8" => Ty::I8,
            "i16" => Ty::I16,
            "i32" => Ty::I32,
            "i64" => Ty::I64,
            "i128" => Ty::I128,
            "ptr" => Ty::Ptr,
            _ => None?,
        })
    }

    pub fn is_int(self) -> bool {
        !matches!(self, Ty::Ptr)
    }
}

/// Source location, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Loc {
    pub line: u32,
    pub col: u32,
}

impl std::fmt::Display for Loc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagKind {
    Syntax,
    DuplicateDefinition,
    UndefinedName,
    TypeMismatch,
    MalformedBlock,
    ArityMismatch,
    DominanceViolation,
    InvalidAttribute,
    MissingEntry,
}

/// A parse or validation problem, carrying the offending location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagKind,
    pub loc: Loc,
    pub message: String,
}

impl Diagnostic {
    pub fn new(kind: DiagKind, loc: Loc, message: impl Into<String>) -> Self {
        Diagnostic { kind, loc, message: message.into() }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {:?}: {}", self.loc, self.kind, self.message)
    }
}

/// Policy modes for the hardening pass. `None` leaves programs untouched,
/// `Annotated` routes memory operations through runtime checks and splits
/// accesses to annotated allocations, `AllSecret` treats every allocation as
/// secret and splits unconditionally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    None,
    Annotated,
    AllSecret,
}

impl PolicyMode {
    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::None => "none",
            PolicyMode::Annotated => "annotated",
            PolicyMode::AllSecret => "all_secret",
        }
    }

    pub fn from_name(s: &str) -> Option<PolicyMode> {
        Some(match s {
            "none" => PolicyMode::None,
            "annotated" => PolicyMode::Annotated,
            "all_secret" | "all-secret" => PolicyMode::AllSecret,
            _ => None?,
        })
    }
}

/// Marker carried by transformed programs so the pass refuses to run twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformMeta {
    pub policy: PolicyMode,
    pub prefix: u32,
}

#[derive(Debug, Clone)]
pub struct GlobalDef {
    pub name: String,
    pub size: u64,
    pub init: Vec<u8>,
    /// Set only by the all-or-nothing globals policy; source programs leave
    /// this false.
    pub secret: bool,
    pub loc: Loc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: Ty,
}

#[derive(Debug, Clone)]
pub struct FunctionDef {
    pub name: String,
    pub params: Vec<Param>,
    pub blocks: Vec<Block>,
    pub loc: Loc,
}

impl FunctionDef {
    /// Return type inferred from the first `ret`; `None` means void.
    pub fn ret_ty(&self) -> Option<Ty> {
        self.blocks
            .iter()
            .flat_map(|b| b.insts.iter())
            .find_map(|i| match &i.kind {
                InstKind::Ret { value: Some((ty, _)) } => Some(*ty),
                _ => None,
            })
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
    pub loc: Loc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub meta: Option<TransformMeta>,
    pub globals: Vec<GlobalDef>,
    pub functions: Vec<FunctionDef>,
    /// Name of the entry function. Always `main` for parsed programs.
    pub entry: String,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalDef> {
        self.globals.iter().find(|g| g.name == name)
    }
}

// Structural equality deliberately ignores source locations so round-trips
// through the printer compare equal.
impl PartialEq for GlobalDef {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name && self.size == o.size && self.init == o.init && self.secret == o.secret
    }
}

impl PartialEq for FunctionDef {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name && self.params == o.params && self.blocks == o.blocks
    }
}

impl PartialEq for Block {
    fn eq(&self, o: &Self) -> bool {
        self.label == o.label && self.insts == o.insts
    }
}

impl PartialEq for Inst {
    fn eq(&self, o: &Self) -> bool {
        self.kind == o.kind
    }
}

/// An instruction operand. Immediate values are stored masked to the
/// instruction's declared type.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Reg(String),
    Imm(u128),
    Global(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Xor,
    And,
    Or,
    Shl,
    Lshr,
    Mul,
}

impl BinOp {
    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Xor => "xor",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Shl => "shl",
            BinOp::Lshr => "lshr",
            BinOp::Mul => "mul",
        }
    }

    pub fn from_name(s: &str) -> Option<BinOp> {
        Some(match s {
            "add" => BinOp::Add,
            "sub" => BinOp::Sub,
            "xor" => BinOp::Xor,
            "and" => BinOp::And,
            "or" => BinOp::Or,
            "shl" => BinOp::Shl,
            "lshr" => BinOp::Lshr,
            "mul" => BinOp::Mul,
            _ => None?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcmpCond {
    Eq,
    Ne,
    Ult,
    Ule,
    Ugt,
    Uge,
    Slt,
    Sle,
    Sgt,
    Sge,
}

impl IcmpCond {
    pub fn name(self) -> &'static str {
        match self {
            IcmpCond::Eq => "eq",
            IcmpCond::Ne => "ne",
            IcmpCond::Ult => "ult",
            IcmpCond::Ule => "ule",
            IcmpCond::Ugt => "ugt",
            IcmpCond::Uge => "uge",
            IcmpCond::Slt => "slt",
            IcmpCond::Sle => "sle",
            IcmpCond::Sgt => "sgt",
            IcmpCond::Sge => "sge",
        }
    }

    pub fn from_name(s: &str) -> Option<IcmpCond> {
        Some(match s {
            "eq" => IcmpCond::Eq,
            "ne" => IcmpCond::Ne,
            "ult" => IcmpCond::Ult,
            "ule" => IcmpCond::Ule,
            "ugt" => IcmpCond::Ugt,
            "uge" => IcmpCond::Uge,
            "slt" => IcmpCond::Slt,
            "sle" => IcmpCond::Sle,
            "sgt" => IcmpCond::Sgt,
            "sge" => IcmpCond::Sge,
            _ => None?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Inst {
    pub loc: Loc,
    pub kind: InstKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InstKind {
    Const {
        dst: String,
        ty: Ty,
        value: u128,
    },
    Alloca {
        dst: String,
        ty: Ty,
        count: u64,
        align: u64,
        secret: bool,
    },
    SecretAlloca {
        dst: String,
        ty: Ty,
        count: u64,
        align: u64,
    },
    Load {
        dst: String,
        ty: Ty,
        addr: Operand,
        align: u64,
    },
    Store {
        ty: Ty,
        value: Operand,
        addr: Operand,
        align: u64,
    },
    Gep {
        dst: String,
        ty: Ty,
        base: Operand,
        index: Operand,
    },
    Bin {
        dst: String,
        op: BinOp,
        ty: Ty,
        lhs: Operand,
        rhs: Operand,
    },
    Icmp {
        dst: String,
        cond: IcmpCond,
        ty: Ty,
        lhs: Operand,
        rhs: Operand,
    },
    Select {
        dst: String,
        ty: Ty,
        cond: Operand,
        then_v: Operand,
        else_v: Operand,
    },
    Call {
        /// None for `call void`.
        dst: Option<String>,
        ret_ty: Option<Ty>,
        callee: String,
        args: Vec<(Ty, Operand)>,
    },
    Br {
        target: String,
    },
    CondBr {
        cond: Operand,
        then_l: String,
        else_l: String,
    },
    Ret {
        value: Option<(Ty, Operand)>,
    },
}

impl InstKind {
    pub fn opcode_name(&self) -> &'static str {
        match self {
            InstKind::Const { .. } => "const",
            InstKind::Alloca { .. } => "alloca",
            InstKind::SecretAlloca { .. } => "secret_alloca",
            InstKind::Load { .. } => "load",
            InstKind::Store { .. } => "store",
            InstKind::Gep { .. } => "gep",
            InstKind::Bin { op, .. } => op.name(),
            InstKind::Icmp { .. } => "icmp",
            InstKind::Select { .. } => "select",
            InstKind::Call { .. } => "call",
            InstKind::Br { .. } => "br",
            InstKind::CondBr { .. } => "condbr",
            InstKind::Ret { .. } => "ret",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            InstKind::Br { .. } | InstKind::CondBr { .. } | InstKind::Ret { .. }
        )
    }

    /// Destination register defined by this instruction, if any.
    pub fn dst(&self) -> Option<&str> {
        match self {
            InstKind::Const { dst, .. }
            | InstKind::Alloca { dst, .. }
            | InstKind::SecretAlloca { dst, .. }
            | InstKind::Load { dst, .. }
            | InstKind::Gep { dst, .. }
            | InstKind::Bin { dst, .. }
            | InstKind::Icmp { dst, .. }
            | InstKind::Select { dst, .. } => Some(dst),
            InstKind::Call { dst, .. } => dst.as_deref(),
            _ => None,
        }
    }

    /// All operands read by this instruction.
    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            InstKind::Const { .. } | InstKind::Alloca { .. } | InstKind::SecretAlloca { .. } => {
                vec![]
            }
            InstKind::Load { addr, .. } => vec![addr],
            InstKind::Store { value, addr, .. } => vec![value, addr],
            InstKind::Gep { base, index, .. } => vec![base, index],
            InstKind::Bin { lhs, rhs, .. } | InstKind::Icmp { lhs, rhs, .. } => vec![lhs, rhs],
            InstKind::Select { cond, then_v, else_v, .. } => vec![cond, then_v, else_v],
            InstKind::Call { args, .. } => args.iter().map(|(_, o)| o).collect(),
            InstKind::Br { .. } => vec![],
            InstKind::CondBr { cond, .. } => vec![cond],
            InstKind::Ret { value } => value.iter().map(|(_, o)| o).collect(),
        }
    }
}

/// Argument signature entry for an intrinsic. `Word` accepts either `i64`
/// or `ptr`, which lets pointer-typed values round-trip through the 64-bit
/// store/load intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgSig {
    Exact(Ty),
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetSig {
    Void,
    Exact(Ty),
    Word,
}

impl ArgSig {
    pub fn accepts(self, ty: Ty) -> bool {
        match self {
            ArgSig::Exact(t) => t == ty,
            ArgSig::Word => matches!(ty, Ty::I64 | Ty::Ptr),
        }
    }
}

impl RetSig {
    pub fn accepts(self, ty: Option<Ty>) -> bool {
        match (self, ty) {
            (RetSig::Void, None) => true,
            (RetSig::Exact(t), Some(d)) => t == d,
            (RetSig::Word, Some(d)) => matches!(d, Ty::I64 | Ty::Ptr),
            _ => false,
        }
    }
}

/// Signature of a built-in callable, or `None` if the name is not an
/// intrinsic. Source programs may call the plain set; the hardening pass
/// emits the `ss_`-prefixed runtime set.
pub fn intrinsic_sig(name: &str) -> Option<(Vec<ArgSig>, RetSig)> {
    use ArgSig::*;
    use RetSig::Void;
    let e = ArgSig::Exact;
    Some(match name {
        "malloc" | "secret_malloc" | "ss_secret_malloc" => {
            (vec![e(Ty::I64)], RetSig::Exact(Ty::Ptr))
        }
        "free" | "secret_free" | "ss_secret_free" => (vec![e(Ty::Ptr)], Void),
        "memcpy" | "ss_memcpy" => (vec![e(Ty::Ptr), e(Ty::Ptr), e(Ty::I64)], Void),
        "memset" | "ss_memset" => (vec![e(Ty::Ptr), e(Ty::I64), e(Ty::I64)], Void),
        "memcmp" | "ss_memcmp" => {
            (vec![e(Ty::Ptr), e(Ty::Ptr), e(Ty::I64)], RetSig::Exact(Ty::I64))
        }
        "write_out" | "ss_write_out" => (vec![e(Ty::Ptr), e(Ty::I64)], Void),
        "ss_store8" => (vec![e(Ty::Ptr), e(Ty::I8)], Void),
        "ss_store16" => (vec![e(Ty::Ptr), e(Ty::I16)], Void),
        "ss_store32" => (vec![e(Ty::Ptr), e(Ty::I32)], Void),
        "ss_store64" => (vec![e(Ty::Ptr), Word], Void),
        "ss_store128" => (vec![e(Ty::Ptr), e(Ty::I128)], Void),
        "ss_load8" => (vec![e(Ty::Ptr)], RetSig::Exact(Ty::I8)),
        "ss_load16" => (vec![e(Ty::Ptr)], RetSig::Exact(Ty::I16)),
        "ss_load32" => (vec![e(Ty::Ptr)], RetSig::Exact(Ty::I32)),
        "ss_load64" => (vec![e(Ty::Ptr)], RetSig::Word),
        "ss_load128" => (vec![e(Ty::Ptr)], RetSig::Exact(Ty::I128)),
        "ss_declassify" | "ss_classify" => (vec![e(Ty::Ptr), e(Ty::Ptr), e(Ty::I64)], Void),
        "ss_frame_push" | "ss_frame_pop" => (vec![], Void),
        "ss_is_secret" => (vec![e(Ty::Ptr)], RetSig::Exact(Ty::I64)),
        "ss_register_global" => (vec![e(Ty::Ptr), e(Ty::I64)], Void),
        _ => None?,
    })
}

/// True for the names reserved for the runtime ABI.
pub fn is_runtime_intrinsic(name: &str) -> bool {
    name.starts_with("ss_") && intrinsic_sig(name).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program_parses() {
        let p = parse_program("fn main() { ret i64 0 }").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.globals.len(), 0);
        assert_eq!(p.functions[0].blocks[0].label, "entry");
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn ctswap_fixture_parses() {
        let text = std::fs::read_to_string(crate::corpus::default_dir().join("ctswap.ir")).unwrap();
        let p = parse_program(&text).unwrap();
        let main = p.function("main").unwrap();
        let insts: Vec<_> = main.blocks.iter().flat_map(|b| b.insts.iter()).collect();
        let loads = insts.iter().filter(|i| matches!(i.kind, InstKind::Load { .. })).count();
        let stores = insts.iter().filter(|i| matches!(i.kind, InstKind::Store { .. })).count();
        let xors = insts
            .iter()
            .filter(|i| matches!(i.kind, InstKind::Bin { op: BinOp::Xor, .. }))
            .count();
        assert!(loads >= 5, "loads of cond, a0, b0, a, b");
        assert!(stores >= 4);
        assert!(xors >= 3, "xor/mask/xor sequence");
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn store_to_undefined_register_is_syntax_error() {
        let diags = parse_program("fn main() { store i64 %nope, ptr %also, align 8 ret i64 0 }")
            .unwrap_err();
        assert!(diags.iter().any(|d| d.kind == DiagKind::Syntax && d.message.contains("%nope")));
    }

    #[test]
    fn duplicate_definitions_are_reported() {
        let diags = parse_program("fn main() { %a = const i64 1 %a = const i64 2 ret i64 0 }")
            .unwrap_err();
        assert!(diags.iter().any(|d| d.kind == DiagKind::DuplicateDefinition));
        let diags =
            parse_program("fn f() { ret void } fn f() { ret void } fn main() { ret i64 0 }")
                .unwrap_err();
        assert!(diags.iter().any(|d| d.kind == DiagKind::DuplicateDefinition));
    }

    #[test]
    fn roundtrip_minimal() {
        let p = parse_program("fn main() { ret i64 0 }").unwrap();
        let text = print_program(&p);
        let q = parse_program(&text).unwrap();
        assert_eq!(p, q);
        // canonical text is a fixed point
        assert_eq!(text, print_program(&q));
    }

    #[test]
    fn roundtrip_with_globals_and_meta() {
        let src = "transformed policy=annotated prefix=0xdeadceef\n\
                   global g : 4 = 0xdeadbeef secret\n\
                   fn main() {\nentry:\n  %p = gep i8, ptr @g, 2\n  %v = load i8, ptr %p, align 1\n  ret i64 0\n}\n";
        let p = parse_program(src).unwrap();
        assert_eq!(p.meta, Some(TransformMeta { policy: PolicyMode::Annotated, prefix: 0xdead_ceef }));
        assert_eq!(p.globals[0].init, vec![0xde, 0xad, 0xbe, 0xef]);
        let q = parse_program(&print_program(&p)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn empty_program_prints_nothing() {
        let p = parse_program("").unwrap();
        assert_eq!(print_program(&p), "");
    }

    #[test]
    fn two_terminators_is_malformed_block() {
        let p = parse_program("fn main() { ret i64 0 ret i64 1 }").unwrap();
        let diags = validate(&p);
        assert!(diags.iter().any(|d| d.kind == DiagKind::MalformedBlock));
    }

    #[test]
    fn type_mismatch_is_reported() {
        let p = parse_program(
            "fn main() { %a = const i32 1 %b = add i64 %a, 2 ret i64 %b }",
        )
        .unwrap();
        let diags = validate(&p);
        assert!(diags.iter().any(|d| d.kind == DiagKind::TypeMismatch));
    }

    #[test]
    fn dominance_violation_is_reported() {
        let src = "fn main() {\nentry:\n  condbr 1, a, b\na:\n  %x = const i64 5\n  br b\nb:\n  %y = add i64 %x, 1\n  ret i64 %y\n}\n";
        let p = parse_program(src).unwrap();
        let diags = validate(&p);
        assert!(diags.iter().any(|d| d.kind == DiagKind::DominanceViolation));
    }

    #[test]
    fn negative_immediates_mask_to_type() {
        let p = parse_program("fn main() { %a = const i64 -1 ret i64 %a }").unwrap();
        let InstKind::Const { value, .. } = &p.functions[0].blocks[0].insts[0].kind else {
            panic!()
        };
        assert_eq!(*value, u64::MAX as u128);
    }

    #[test]
    fn intrinsic_signatures_cover_runtime_abi() {
        for name in [
            "ss_store8", "ss_store16", "ss_store32", "ss_store64", "ss_store128", "ss_load8",
            "ss_load16", "ss_load32", "ss_load64", "ss_load128", "ss_secret_malloc",
            "ss_secret_free", "ss_declassify", "ss_classify", "ss_frame_push", "ss_frame_pop",
        ] {
            assert!(intrinsic_sig(name).is_some(), "{name} missing");
        }
        assert!(intrinsic_sig("ss_unknown").is_none());
    }
}

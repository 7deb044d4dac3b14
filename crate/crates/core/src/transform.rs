//! The hardening pass.
//!
//! Rewrites memory operations so secret data is only ever stored split into
//! 32-bit fragments behind a fixed prefix:
//!
//! * loads and stores are routed through the `ss_load*` / `ss_store*`
//!   runtime intrinsics. Under the `annotated` policy each store gets an
//!   explicit tag check with the transformed call on one arm and the
//!   original store on the other; loads carry the same check inside the
//!   runtime call, since the IR has no phi to rejoin a value-producing
//!   branch and spilling the reassembled value to a plain stack slot would
//!   put the secret right back into memory. Under `all_secret` the calls
//!   are emitted unconditionally.
//! * secret-annotated allocas (all allocas under `all_secret`) become
//!   `secret_alloca`, and functions containing any get frame push/pop
//!   instrumentation so shadow registrations die with the frame.
//! * libc-style intrinsics are intercepted and redirected to split-aware
//!   versions; `write_out` data is converted back to plain form at the
//!   call boundary.
//! * with the all-or-nothing globals policy, a constructor function is
//!   prepended that registers shadow space for every global and rewrites
//!   the initializers into split form.
//!
//! Transformed programs carry a marker; running the pass twice is an error.

use crate::ir::{
    print_program, validate, Block, Diagnostic, FunctionDef, Inst, InstKind, Loc, Operand,
    PolicyMode, Program, TransformMeta, Ty,
};
use crate::runtime::ceil_to_8;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("program already carries a transform marker")]
    AlreadyTransformed,
    #[error("prefix 0x{0:08x} would form a canonical address (top 16 bits are zero)")]
    InvalidPrefix(u32),
    #[error("input program is invalid: {}", format_diags(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("call to unknown intrinsic @{0}")]
    UnknownIntrinsic(String),
    #[error("unsupported instruction at {0}: {1}")]
    UnsupportedInstruction(Loc, String),
    #[error("pass produced an invalid program: {}", format_diags(.0))]
    Internal(Vec<Diagnostic>),
}

fn format_diags(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Pass configuration. The prefix must be non-canonical when placed in the
/// high half of a word: its top 16 bits land in address bits 48..64, so a
/// zero top half would let a prefixed word pass translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    pub mode: PolicyMode,
    pub globals_secret: bool,
    pub prefix: u32,
}

impl Policy {
    pub fn new(mode: PolicyMode, globals_secret: bool, prefix: u32) -> Result<Policy, TransformError> {
        if prefix >> 16 == 0 {
            return Err(TransformError::InvalidPrefix(prefix));
        }
        Ok(Policy { mode, globals_secret, prefix })
    }
}

pub fn store_intrinsic(size: u64) -> &'static str {
    match size {
        1 => "ss_store8",
        2 => "ss_store16",
        4 => "ss_store32",
        8 => "ss_store64",
        16 => "ss_store128",
        _ => unreachable!("store sizes are 1/2/4/8/16"),
    }
}

pub fn load_intrinsic(size: u64) -> &'static str {
    match size {
        1 => "ss_load8",
        2 => "ss_load16",
        4 => "ss_load32",
        8 => "ss_load64",
        16 => "ss_load128",
        _ => unreachable!("load sizes are 1/2/4/8/16"),
    }
}

/// Fresh-name supply that avoids everything already used in the function.
struct NameGen {
    used: HashSet<String>,
    next: u64,
}

impl NameGen {
    fn for_function(f: &FunctionDef) -> Self {
        let mut used = HashSet::new();
        for p in &f.params {
            used.insert(p.name.clone());
        }
        for b in &f.blocks {
            used.insert(b.label.clone());
            for i in &b.insts {
                if let Some(d) = i.kind.dst() {
                    used.insert(d.to_string());
                }
            }
        }
        NameGen { used, next: 0 }
    }

    fn fresh(&mut self, stem: &str) -> String {
        loop {
            let name = format!("{stem}{}", self.next);
            self.next += 1;
            if self.used.insert(name.clone()) {
                return name;
            }
        }
    }
}

fn call(callee: &str, args: Vec<(Ty, Operand)>, loc: Loc) -> Inst {
    Inst {
        loc,
        kind: InstKind::Call { dst: None, ret_ty: None, callee: callee.into(), args },
    }
}

/// Redirect libc-style calls to their split-aware runtime versions.
/// `all_secret` additionally sends plain heap traffic through the secret
/// allocator so every allocation is tracked.
pub fn intercept_intrinsics(p: &Program, mode: PolicyMode) -> Result<Program, TransformError> {
    let mut out = p.clone();
    let defined: HashSet<&str> = p.functions.iter().map(|f| f.name.as_str()).collect();
    for f in &mut out.functions {
        for b in &mut f.blocks {
            for inst in &mut b.insts {
                let InstKind::Call { callee, .. } = &mut inst.kind else { continue };
                if defined.contains(callee.as_str()) {
                    continue;
                }
                if crate::ir::intrinsic_sig(callee).is_none() {
                    return Err(TransformError::UnknownIntrinsic(callee.clone()));
                }
                let new = match callee.as_str() {
                    "memcpy" => "ss_memcpy",
                    "memset" => "ss_memset",
                    "memcmp" => "ss_memcmp",
                    "write_out" => "ss_write_out",
                    "secret_malloc" => "ss_secret_malloc",
                    "secret_free" => "ss_secret_free",
                    "malloc" if mode == PolicyMode::AllSecret => "ss_secret_malloc",
                    "free" if mode == PolicyMode::AllSecret => "ss_secret_free",
                    _ => continue,
                };
                *callee = new.into();
            }
        }
    }
    Ok(out)
}

/// Rewrite one function's allocas, loads, and stores for the given mode.
fn rewrite_function(f: &FunctionDef, mode: PolicyMode) -> Result<FunctionDef, TransformError> {
    let mut names = NameGen::for_function(f);
    let mut out_blocks: Vec<Block> = Vec::new();

    for block in &f.blocks {
        let mut cur = Block { label: block.label.clone(), insts: Vec::new(), loc: block.loc };
        for inst in &block.insts {
            match &inst.kind {
                InstKind::Alloca { dst, ty, count, align, secret } => {
                    let make_secret = *secret || mode == PolicyMode::AllSecret;
                    if make_secret {
                        cur.insts.push(Inst {
                            loc: inst.loc,
                            kind: InstKind::SecretAlloca {
                                dst: dst.clone(),
                                ty: *ty,
                                count: *count,
                                align: *align,
                            },
                        });
                    } else {
                        cur.insts.push(inst.clone());
                    }
                }
                InstKind::Load { dst, ty, addr, .. } => {
                    // tag check and fast path live inside the runtime call
                    cur.insts.push(Inst {
                        loc: inst.loc,
                        kind: InstKind::Call {
                            dst: Some(dst.clone()),
                            ret_ty: Some(*ty),
                            callee: load_intrinsic(ty.size()).into(),
                            args: vec![(Ty::Ptr, addr.clone())],
                        },
                    });
                }
                InstKind::Store { ty, value, addr, align } => {
                    let routed = call(
                        store_intrinsic(ty.size()),
                        vec![(Ty::Ptr, addr.clone()), (*ty, value.clone())],
                        inst.loc,
                    );
                    match mode {
                        PolicyMode::AllSecret => cur.insts.push(routed),
                        PolicyMode::Annotated => {
                            // explicit guard: transformed arm and the
                            // untouched store on the fast arm
                            let flag = names.fresh("ss.t");
                            let l_sec = names.fresh("ss.sec");
                            let l_fast = names.fresh("ss.fast");
                            let l_cont = names.fresh("ss.cont");
                            cur.insts.push(Inst {
                                loc: inst.loc,
                                kind: InstKind::Call {
                                    dst: Some(flag.clone()),
                                    ret_ty: Some(Ty::I64),
                                    callee: "ss_is_secret".into(),
                                    args: vec![(Ty::Ptr, addr.clone())],
                                },
                            });
                            cur.insts.push(Inst {
                                loc: inst.loc,
                                kind: InstKind::CondBr {
                                    cond: Operand::Reg(flag),
                                    then_l: l_sec.clone(),
                                    else_l: l_fast.clone(),
                                },
                            });
                            out_blocks.push(std::mem::replace(
                                &mut cur,
                                Block { label: l_cont.clone(), insts: Vec::new(), loc: inst.loc },
                            ));
                            out_blocks.push(Block {
                                label: l_sec,
                                insts: vec![
                                    routed,
                                    Inst { loc: inst.loc, kind: InstKind::Br { target: l_cont.clone() } },
                                ],
                                loc: inst.loc,
                            });
                            out_blocks.push(Block {
                                label: l_fast,
                                insts: vec![
                                    Inst {
                                        loc: inst.loc,
                                        kind: InstKind::Store {
                                            ty: *ty,
                                            value: value.clone(),
                                            addr: addr.clone(),
                                            align: *align,
                                        },
                                    },
                                    Inst { loc: inst.loc, kind: InstKind::Br { target: l_cont } },
                                ],
                                loc: inst.loc,
                            });
                        }
                        PolicyMode::None => unreachable!("mode none never rewrites"),
                    }
                }
                _ => cur.insts.push(inst.clone()),
            }
        }
        out_blocks.push(cur);
    }

    Ok(FunctionDef {
        name: f.name.clone(),
        params: f.params.clone(),
        blocks: out_blocks,
        loc: f.loc,
    })
}

/// Bracket functions holding secret stack slots with frame push/pop so the
/// runtime can release shadow registrations on return.
fn instrument_frames(f: &mut FunctionDef) {
    let has_secret_alloca = f
        .blocks
        .iter()
        .flat_map(|b| b.insts.iter())
        .any(|i| matches!(i.kind, InstKind::SecretAlloca { .. }));
    if !has_secret_alloca {
        return;
    }
    let loc = f.loc;
    f.blocks[0].insts.insert(0, call("ss_frame_push", vec![], loc));
    for b in &mut f.blocks {
        let mut i = 0;
        while i < b.insts.len() {
            if matches!(b.insts[i].kind, InstKind::Ret { .. }) {
                b.insts.insert(i, call("ss_frame_pop", vec![], b.insts[i].loc));
                i += 2;
            } else {
                i += 1;
            }
        }
    }
}

/// Prepend a constructor that gives every global a shadow region and
/// rewrites its initializer into split form, and mark the globals secret so
/// their addresses resolve tagged. All-or-nothing by design.
pub fn emit_global_ctor(p: &Program, policy: &Policy) -> Result<Program, TransformError> {
    assert!(policy.globals_secret);
    let mut out = p.clone();
    if out.globals.is_empty() {
        return Ok(out); // nothing to do, constructor omitted
    }
    let mut ctor_name = "__ss_global_init".to_string();
    while out.functions.iter().any(|f| f.name == ctor_name) {
        ctor_name.push('x');
    }

    let loc = Loc::default();
    let mut insts = Vec::new();
    let mut n = 0u64;
    for g in &mut out.globals {
        g.secret = true;
        insts.push(call(
            "ss_register_global",
            vec![(Ty::Ptr, Operand::Global(g.name.clone())), (Ty::I64, Operand::Imm(g.size as u128))],
            loc,
        ));
        for k in 0..ceil_to_8(g.size) / 8 {
            let mut chunk = [0u8; 8];
            for i in 0..8 {
                let idx = (k * 8 + i) as usize;
                if idx < g.init.len() {
                    chunk[i as usize] = g.init[idx];
                }
            }
            let value = u64::from_le_bytes(chunk);
            let creg = format!("ss.c{n}");
            let preg = format!("ss.p{n}");
            n += 1;
            insts.push(Inst {
                loc,
                kind: InstKind::Const { dst: creg.clone(), ty: Ty::I64, value: value as u128 },
            });
            insts.push(Inst {
                loc,
                kind: InstKind::Gep {
                    dst: preg.clone(),
                    ty: Ty::I8,
                    base: Operand::Global(g.name.clone()),
                    index: Operand::Imm((k * 8) as u128),
                },
            });
            insts.push(call(
                "ss_store64",
                vec![(Ty::Ptr, Operand::Reg(preg)), (Ty::I64, Operand::Reg(creg))],
                loc,
            ));
        }
    }
    insts.push(Inst { loc, kind: InstKind::Ret { value: None } });

    let ctor = FunctionDef {
        name: ctor_name.clone(),
        params: Vec::new(),
        blocks: vec![Block { label: "entry".into(), insts, loc }],
        loc,
    };
    out.functions.insert(0, ctor);

    let entry_name = out.entry.clone();
    if let Some(main) = out.functions.iter_mut().find(|f| f.name == entry_name) {
        main.blocks[0].insts.insert(0, call(&ctor_name, vec![], loc));
    }
    Ok(out)
}

/// Run the whole pass. Mode `none` returns the program unchanged (and
/// unmarked); other modes produce a marked program that validates.
pub fn transform_program(p: &Program, policy: &Policy) -> Result<Program, TransformError> {
    if p.meta.is_some() {
        return Err(TransformError::AlreadyTransformed);
    }
    let diags = validate(p);
    if !diags.is_empty() {
        return Err(TransformError::Invalid(diags));
    }
    if policy.mode == PolicyMode::None {
        return Ok(p.clone());
    }

    let mut out = intercept_intrinsics(p, policy.mode)?;
    out.functions = out
        .functions
        .iter()
        .map(|f| rewrite_function(f, policy.mode))
        .collect::<Result<_, _>>()?;
    for f in &mut out.functions {
        instrument_frames(f);
    }
    if policy.globals_secret {
        out = emit_global_ctor(&out, policy)?;
    }
    out.meta = Some(TransformMeta { policy: policy.mode, prefix: policy.prefix });

    let diags = validate(&out);
    if !diags.is_empty() {
        return Err(TransformError::Internal(diags));
    }
    Ok(out)
}

/// Static census of memory operations, used to check that the set of
/// instrumented operations only grows from `annotated` to `all_secret`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MemOpCensus {
    pub plain_loads: u64,
    pub plain_stores: u64,
    pub routed_loads: u64,
    pub routed_stores: u64,
    pub guarded_stores: u64,
}

pub fn census(p: &Program) -> MemOpCensus {
    let mut c = MemOpCensus::default();
    for f in &p.functions {
        for b in &f.blocks {
            for i in &b.insts {
                match &i.kind {
                    InstKind::Load { .. } => c.plain_loads += 1,
                    InstKind::Store { .. } => c.plain_stores += 1,
                    InstKind::Call { callee, .. } => {
                        if callee.starts_with("ss_load") {
                            c.routed_loads += 1;
                        } else if callee.starts_with("ss_store") {
                            c.routed_stores += 1;
                        } else if callee == "ss_is_secret" {
                            c.guarded_stores += 1;
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    c
}

/// Convenience: parse-transform-print for tooling and tests.
pub fn transform_text(text: &str, policy: &Policy) -> Result<String, String> {
    let p = crate::ir::parse_program(text).map_err(|d| format_diags(&d))?;
    let q = transform_program(&p, policy).map_err(|e| e.to_string())?;
    Ok(print_program(&q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::runtime::DEFAULT_PREFIX;
    use crate::vm::{run, VmConfig};

    fn policy(mode: PolicyMode) -> Policy {
        Policy::new(mode, false, DEFAULT_PREFIX).unwrap()
    }

    fn ctswap() -> Program {
        let text =
            std::fs::read_to_string(crate::corpus::default_dir().join("ctswap.ir")).unwrap();
        parse_program(&text).unwrap()
    }

    #[test]
    fn prefix_must_be_noncanonical() {
        assert!(Policy::new(PolicyMode::Annotated, false, 0).is_err());
        assert!(Policy::new(PolicyMode::Annotated, false, 0x0000_ffff).is_err());
        assert!(Policy::new(PolicyMode::Annotated, false, 0x0001_0000).is_ok());
        assert!(Policy::new(PolicyMode::Annotated, false, 0xdead_ceef).is_ok());
    }

    #[test]
    fn mode_none_is_identity() {
        let p = ctswap();
        let q = transform_program(&p, &policy(PolicyMode::None)).unwrap();
        assert_eq!(p, q);
        assert_eq!(print_program(&p), print_program(&q));
    }

    #[test]
    fn annotated_routes_loads_and_stores() {
        let p = ctswap();
        let q = transform_program(&p, &policy(PolicyMode::Annotated)).unwrap();
        let text = print_program(&q);
        assert!(text.contains("ss_load64"));
        assert!(text.contains("ss_store64"));
        assert!(text.contains("ss_is_secret"));
        let c = census(&q);
        assert_eq!(c.plain_loads, 0, "every load goes through the runtime");
        assert_eq!(c.routed_stores, c.guarded_stores, "one routed arm per guard");
        assert_eq!(c.plain_stores, c.guarded_stores, "one fast-path arm per guard");
    }

    #[test]
    fn all_secret_transforms_unconditionally() {
        let p = ctswap();
        let q = transform_program(&p, &policy(PolicyMode::AllSecret)).unwrap();
        let c = census(&q);
        assert_eq!(c.plain_loads + c.plain_stores, 0);
        assert_eq!(c.guarded_stores, 0, "no checks under all_secret");
        let text = print_program(&q);
        assert!(text.contains("secret_alloca"));
        assert!(!text.contains("ss_is_secret"));
    }

    #[test]
    fn instrumented_set_grows_with_policy() {
        let p = ctswap();
        let ann = census(&transform_program(&p, &policy(PolicyMode::Annotated)).unwrap());
        let all = census(&transform_program(&p, &policy(PolicyMode::AllSecret)).unwrap());
        assert!(ann.routed_loads == all.routed_loads);
        assert!(ann.routed_stores == all.routed_stores);
        assert!(all.plain_stores == 0 && all.plain_loads == 0);
    }

    #[test]
    fn double_transform_is_rejected() {
        let p = ctswap();
        let q = transform_program(&p, &policy(PolicyMode::Annotated)).unwrap();
        assert!(matches!(
            transform_program(&q, &policy(PolicyMode::Annotated)),
            Err(TransformError::AlreadyTransformed)
        ));
    }

    #[test]
    fn marker_survives_print_parse() {
        let p = ctswap();
        let q = transform_program(&p, &policy(PolicyMode::Annotated)).unwrap();
        let r = parse_program(&print_program(&q)).unwrap();
        assert_eq!(r.meta.unwrap().policy, PolicyMode::Annotated);
        assert_eq!(r.meta.unwrap().prefix, DEFAULT_PREFIX);
    }

    #[test]
    fn block256_all_secret_writes_four_original_and_four_shadow_slots() {
        let text =
            std::fs::read_to_string(crate::corpus::default_dir().join("block256.ir")).unwrap();
        let p = parse_program(&text).unwrap();
        let q = transform_program(&p, &policy(PolicyMode::AllSecret)).unwrap();
        let mut args = vec![0u8; 64];
        for (i, b) in args.iter_mut().enumerate() {
            *b = i as u8 | 0x80; // nonzero in every lane
        }
        let mut checked = false;
        let mut max_prefixed = 0u64;
        let trace = crate::vm::run_with_observer(&q, &args, &VmConfig::default(), |img, point| {
            if point != crate::vm::AuditPoint::AfterSplitStore {
                return;
            }
            checked = true;
            // count live slots holding split fragments: prefix in the high
            // half, data in the low half
            let mut prefixed_words = 0;
            for (_, page) in img.present_pages() {
                for off in (0..4096).step_by(8) {
                    let w = page.word(off);
                    if w >> 32 == DEFAULT_PREFIX as u64 && (w as u32) != 0 {
                        prefixed_words += 1;
                    }
                }
            }
            max_prefixed = max_prefixed.max(prefixed_words);
        });
        assert!(checked);
        // the four block words occupy 4 original + 4 shadow slots, all
        // prefixed; the folded output and staging copies only add more
        assert!(max_prefixed >= 8, "found {max_prefixed}");
        assert!(trace.fault.is_none());
        assert!(trace.stats.split_stores >= 5);
    }

    #[test]
    fn secret_alloca_allocates_shadow_and_frees_on_return() {
        let src = "fn kern() {\n  %a = alloca i64, 1, align 8, secret\n  %b = alloca i64, 1, align 8, secret\n  %c = alloca i64, 1, align 8, secret\n  store i64 7, ptr %a, align 8\n  %v = load i64, ptr %a, align 8\n  ret i64 %v\n}\nfn main() {\n  %r = call i64 @kern()\n  %s = call i64 @kern()\n  %t = add i64 %r, %s\n  ret i64 %t\n}\n";
        let p = parse_program(src).unwrap();
        let q = transform_program(&p, &policy(PolicyMode::Annotated)).unwrap();
        let text = print_program(&q);
        assert!(text.contains("ss_frame_push"));
        assert!(text.contains("ss_frame_pop"));
        let trace = run(&q, &[], &VmConfig::default());
        assert_eq!(trace.exit, Some(14));
        assert_eq!(trace.shadow_entries_at_exit, 0, "frames released all registrations");
        assert_eq!(trace.stats.secret_physical_bytes, 6 * 16, "3 allocas x 2 calls x (8+8)");
    }

    #[test]
    fn non_secret_alloca_unchanged_under_annotated() {
        let src = "fn main() {\n  %a = alloca i64, 1, align 8\n  store i64 1, ptr %a, align 8\n  ret i64 0\n}\n";
        let p = parse_program(src).unwrap();
        let q = transform_program(&p, &policy(PolicyMode::Annotated)).unwrap();
        let text = print_program(&q);
        assert!(text.contains("%a = alloca i64"));
        assert!(!text.contains("secret_alloca"));
        assert!(!text.contains("ss_frame_push"));
    }

    #[test]
    fn intercepts_redirect_libc_calls() {
        let p = ctswap();
        let q = intercept_intrinsics(&p, PolicyMode::Annotated).unwrap();
        let text = print_program(&q);
        assert!(text.contains("ss_memcpy"));
        assert!(text.contains("ss_write_out"));
        assert!(!text.contains("@memcpy"));
        assert!(!text.contains("@write_out"));
    }

    #[test]
    fn all_secret_intercepts_plain_heap() {
        let src = "fn main() {\n  %p = call ptr @malloc(i64 16)\n  call void @free(ptr %p)\n  ret i64 0\n}\n";
        let p = parse_program(src).unwrap();
        let ann = print_program(&intercept_intrinsics(&p, PolicyMode::Annotated).unwrap());
        assert!(ann.contains("@malloc") && ann.contains("@free"));
        let all = print_program(&intercept_intrinsics(&p, PolicyMode::AllSecret).unwrap());
        assert!(all.contains("ss_secret_malloc") && all.contains("ss_secret_free"));
    }

    #[test]
    fn unknown_intrinsic_is_an_error() {
        use crate::ir::{Block, FunctionDef, Inst, Loc};
        let mut p = parse_program("fn main() { ret i64 0 }").unwrap();
        p.functions[0].blocks[0].insts.insert(
            0,
            Inst {
                loc: Loc::default(),
                kind: InstKind::Call {
                    dst: None,
                    ret_ty: None,
                    callee: "mystery".into(),
                    args: vec![],
                },
            },
        );
        let _ = (Block { label: String::new(), insts: vec![], loc: Loc::default() },
                 FunctionDef { name: String::new(), params: vec![], blocks: vec![], loc: Loc::default() });
        assert!(matches!(
            intercept_intrinsics(&p, PolicyMode::Annotated),
            Err(TransformError::UnknownIntrinsic(n)) if n == "mystery"
        ));
    }

    #[test]
    fn global_ctor_emitted_and_initializer_preserved() {
        let text =
            std::fs::read_to_string(crate::corpus::default_dir().join("globals_demo.ir")).unwrap();
        let p = parse_program(&text).unwrap();
        let pol = Policy::new(PolicyMode::Annotated, true, DEFAULT_PREFIX).unwrap();
        let q = transform_program(&p, &pol).unwrap();
        let qt = print_program(&q);
        assert!(qt.contains("__ss_global_init"));
        assert!(qt.contains("ss_register_global"));
        assert!(qt.contains("secret"), "globals marked secret");
        let args = vec![0x5au8; 64];
        let t0 = run(&p, &args, &VmConfig::default());
        let t1 = run(&q, &args, &VmConfig::default());
        assert_eq!(t0.fault, None);
        assert_eq!(t1.fault, None);
        assert_eq!(t0.out, t1.out, "split initializer reads back identically");
        assert_eq!(t0.exit, t1.exit);
    }

    #[test]
    fn globals_policy_off_leaves_program_unchanged_globally() {
        let text =
            std::fs::read_to_string(crate::corpus::default_dir().join("globals_demo.ir")).unwrap();
        let p = parse_program(&text).unwrap();
        let q = transform_program(&p, &policy(PolicyMode::Annotated)).unwrap();
        assert!(!print_program(&q).contains("__ss_global_init"));
        assert!(q.globals.iter().all(|g| !g.secret));
    }

    #[test]
    fn no_globals_means_no_ctor() {
        let p = ctswap();
        let pol = Policy::new(PolicyMode::Annotated, true, DEFAULT_PREFIX).unwrap();
        let q = transform_program(&p, &pol).unwrap();
        assert!(!print_program(&q).contains("__ss_global_init"));
    }

    #[test]
    fn transformed_programs_validate() {
        for file in ["ctswap.ir", "memcpy32.ir", "memset64.ir", "block256.ir", "arx8.ir", "hmac_loop.ir", "planted_pointer.ir", "globals_demo.ir"] {
            let text =
                std::fs::read_to_string(crate::corpus::default_dir().join(file)).unwrap();
            let p = parse_program(&text).unwrap();
            for mode in [PolicyMode::Annotated, PolicyMode::AllSecret] {
                let pol = Policy::new(mode, true, DEFAULT_PREFIX).unwrap();
                let q = transform_program(&p, &pol).unwrap();
                assert!(validate(&q).is_empty(), "{file} {mode:?}");
                // and the text form round-trips
                let r = parse_program(&print_program(&q)).unwrap();
                assert_eq!(q, r, "{file} {mode:?} round-trip");
            }
        }
    }
}

//! Semantic validation: block shape, SSA dominance, and operand typing.
//! A program with an empty diagnostic list executes in the VM without type
//! faults.

use super::*;
use std::collections::{HashMap, HashSet};

struct FnChecker<'a> {
    p: &'a Program,
    f: &'a FunctionDef,
    /// Register types: params plus every destination.
    reg_ty: HashMap<&'a str, Ty>,
    diags: Vec<Diagnostic>,
}

impl<'a> FnChecker<'a> {
    fn check_operand(&mut self, op: &Operand, expect: Ty, loc: Loc, what: &str) {
        let ok = match op {
            Operand::Imm(_) => true,
            Operand::Global(_) => expect == Ty::Ptr,
            Operand::Reg(r) => match self.reg_ty.get(r.as_str()) {
                Some(ty) => *ty == expect,
                // undefined registers are reported by the parser's resolver
                None => true,
            },
        };
        if !ok {
            let got = match op {
                Operand::Reg(r) => self.reg_ty.get(r.as_str()).map(|t| t.name()).unwrap_or("?"),
                Operand::Global(_) => "ptr",
                Operand::Imm(_) => "imm",
            };
            self.diags.push(Diagnostic::new(
                DiagKind::TypeMismatch,
                loc,
                format!("{what} expects {}, found {got}", expect.name()),
            ));
        }
    }

    fn check_align(&mut self, align: u64, loc: Loc) {
        if !matches!(align, 1 | 2 | 4 | 8) {
            self.diags.push(Diagnostic::new(
                DiagKind::InvalidAttribute,
                loc,
                format!("alignment must be 1, 2, 4, or 8, found {align}"),
            ));
        }
    }

    fn check_call(&mut self, inst: &Inst) {
        let InstKind::Call { dst, ret_ty, callee, args } = &inst.kind else {
            return;
        };
        // Defined functions take priority over intrinsic names.
        if let Some(target) = self.p.function(callee) {
            if target.params.len() != args.len() {
                self.diags.push(Diagnostic::new(
                    DiagKind::ArityMismatch,
                    inst.loc,
                    format!(
                        "@{callee} takes {} arguments, {} supplied",
                        target.params.len(),
                        args.len()
                    ),
                ));
            }
            for (param, (ty, op)) in target.params.iter().zip(args.iter()) {
                if param.ty != *ty {
                    self.diags.push(Diagnostic::new(
                        DiagKind::TypeMismatch,
                        inst.loc,
                        format!(
                            "argument '%{}' of @{callee} expects {}, found {}",
                            param.name,
                            param.ty.name(),
                            ty.name()
                        ),
                    ));
                }
                self.check_operand(op, *ty, inst.loc, "call argument");
            }
            let target_ret = target.ret_ty();
            if *ret_ty != target_ret {
                self.diags.push(Diagnostic::new(
                    DiagKind::TypeMismatch,
                    inst.loc,
                    format!(
                        "@{callee} returns {}, call declares {}",
                        target_ret.map(|t| t.name()).unwrap_or("void"),
                        ret_ty.map(|t| t.name()).unwrap_or("void"),
                    ),
                ));
            }
            let _ = dst;
        } else if let Some((sig_args, sig_ret)) = intrinsic_sig(callee) {
            if sig_args.len() != args.len() {
                self.diags.push(Diagnostic::new(
                    DiagKind::ArityMismatch,
                    inst.loc,
                    format!("@{callee} takes {} arguments, {} supplied", sig_args.len(), args.len()),
                ));
            }
            for (sig, (ty, op)) in sig_args.iter().zip(args.iter()) {
                if !sig.accepts(*ty) {
                    self.diags.push(Diagnostic::new(
                        DiagKind::TypeMismatch,
                        inst.loc,
                        format!("argument of @{callee} has unsupported type {}", ty.name()),
                    ));
                }
                self.check_operand(op, *ty, inst.loc, "call argument");
            }
            if !sig_ret.accepts(*ret_ty) {
                self.diags.push(Diagnostic::new(
                    DiagKind::TypeMismatch,
                    inst.loc,
                    format!(
                        "@{callee} call declares return type {}",
                        ret_ty.map(|t| t.name()).unwrap_or("void")
                    ),
                ));
            }
        }
        // Unknown callees were reported at parse time.
    }

    fn check_inst(&mut self, inst: &Inst) {
        let loc = inst.loc;
        match &inst.kind {
            InstKind::Const { ty, .. } => {
                if !ty.is_int() {
                    self.diags.push(Diagnostic::new(
                        DiagKind::TypeMismatch,
                        loc,
                        "const requires an integer type",
                    ));
                }
            }
            InstKind::Alloca { count, align, .. } | InstKind::SecretAlloca { count, align, .. } => {
                self.check_align(*align, loc);
                if *count == 0 {
                    self.diags.push(Diagnostic::new(
                        DiagKind::InvalidAttribute,
                        loc,
                        "alloca element count must be nonzero",
                    ));
                }
            }
            InstKind::Load { addr, align, .. } => {
                self.check_operand(addr, Ty::Ptr, loc, "load address");
                self.check_align(*align, loc);
            }
            InstKind::Store { ty, value, addr, align } => {
                self.check_operand(value, *ty, loc, "store value");
                self.check_operand(addr, Ty::Ptr, loc, "store address");
                self.check_align(*align, loc);
            }
            InstKind::Gep { base, index, .. } => {
                self.check_operand(base, Ty::Ptr, loc, "gep base");
                self.check_operand(index, Ty::I64, loc, "gep index");
            }
            InstKind::Bin { ty, lhs, rhs, .. } => {
                if !ty.is_int() {
                    self.diags.push(Diagnostic::new(
                        DiagKind::TypeMismatch,
                        loc,
                        "arithmetic requires an integer type",
                    ));
                }
                self.check_operand(lhs, *ty, loc, "operand");
                self.check_operand(rhs, *ty, loc, "operand");
            }
            InstKind::Icmp { ty, lhs, rhs, .. } => {
                if !ty.is_int() {
                    self.diags.push(Diagnostic::new(
                        DiagKind::TypeMismatch,
                        loc,
                        "icmp requires an integer type",
                    ));
                }
                self.check_operand(lhs, *ty, loc, "icmp operand");
                self.check_operand(rhs, *ty, loc, "icmp operand");
            }
            InstKind::Select { ty, cond, then_v, else_v, .. } => {
                self.check_operand(cond, Ty::I64, loc, "select condition");
                self.check_operand(then_v, *ty, loc, "select operand");
                self.check_operand(else_v, *ty, loc, "select operand");
            }
            InstKind::Call { .. } => self.check_call(inst),
            InstKind::CondBr { cond, .. } => {
                self.check_operand(cond, Ty::I64, loc, "condbr condition");
            }
            InstKind::Br { .. } => {}
            InstKind::Ret { value } => {
                if let Some((ty, op)) = value {
                    self.check_operand(op, *ty, loc, "return value");
                }
            }
        }
    }

    /// Every block ends in exactly one terminator, which is the last
    /// instruction.
    fn check_blocks(&mut self) {
        if self.f.blocks.is_empty() {
            self.diags.push(Diagnostic::new(
                DiagKind::MalformedBlock,
                self.f.loc,
                format!("function @{} has no blocks", self.f.name),
            ));
            return;
        }
        for b in &self.f.blocks {
            let n_terms = b.insts.iter().filter(|i| i.kind.is_terminator()).count();
            let last_is_term = b.insts.last().map(|i| i.kind.is_terminator()).unwrap_or(false);
            if n_terms != 1 || !last_is_term {
                self.diags.push(Diagnostic::new(
                    DiagKind::MalformedBlock,
                    b.loc,
                    format!(
                        "block '{}' must end in exactly one terminator (found {n_terms})",
                        b.label
                    ),
                ));
            }
        }
    }

    /// Ret type consistency across the function.
    fn check_rets(&mut self) {
        let mut seen: Option<Option<Ty>> = None;
        for b in &self.f.blocks {
            for inst in &b.insts {
                if let InstKind::Ret { value } = &inst.kind {
                    let ty = value.as_ref().map(|(t, _)| *t);
                    match seen {
                        None => seen = Some(ty),
                        Some(prev) if prev != ty => {
                            self.diags.push(Diagnostic::new(
                                DiagKind::TypeMismatch,
                                inst.loc,
                                format!("mixed return types in @{}", self.f.name),
                            ));
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    /// SSA dominance: every register use is dominated by its definition.
    /// Checked over reachable blocks with the standard iterative dataflow.
    fn check_dominance(&mut self) {
        let n = self.f.blocks.len();
        if n == 0 {
            return;
        }
        let label_idx: HashMap<&str, usize> = self
            .f
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.as_str(), i))
            .collect();
        let succs: Vec<Vec<usize>> = self
            .f
            .blocks
            .iter()
            .map(|b| match b.insts.last().map(|i| &i.kind) {
                Some(InstKind::Br { target }) => {
                    label_idx.get(target.as_str()).copied().into_iter().collect()
                }
                Some(InstKind::CondBr { then_l, else_l, .. }) => [then_l, else_l]
                    .iter()
                    .filter_map(|l| label_idx.get(l.as_str()).copied())
                    .collect(),
                _ => vec![],
            })
            .collect();

        // reachability from entry
        let mut reachable = vec![false; n];
        let mut work = vec![0usize];
        while let Some(i) = work.pop() {
            if std::mem::replace(&mut reachable[i], true) {
                continue;
            }
            work.extend(succs[i].iter().copied());
        }
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, ss) in succs.iter().enumerate() {
            if reachable[i] {
                for &s in ss {
                    preds[s].push(i);
                }
            }
        }

        // dom sets as bitsets
        let words = n.div_ceil(64);
        let full = vec![u64::MAX; words];
        let mut dom: Vec<Vec<u64>> = vec![full.clone(); n];
        dom[0] = vec![0; words];
        dom[0][0] = 1;
        let mut changed = true;
        while changed {
            changed = false;
            for i in 1..n {
                if !reachable[i] {
                    continue;
                }
                let mut new = full.clone();
                for &p in &preds[i] {
                    for w in 0..words {
                        new[w] &= dom[p][w];
                    }
                }
                new[i / 64] |= 1 << (i % 64);
                if new != dom[i] {
                    dom[i] = new;
                    changed = true;
                }
            }
        }
        let dominates =
            |a: usize, b: usize| -> bool { dom[b][a / 64] & (1 << (a % 64)) != 0 };

        // def site per register: params dominate everything
        let mut def_site: HashMap<&str, (usize, usize)> = HashMap::new();
        for (bi, b) in self.f.blocks.iter().enumerate() {
            for (ii, inst) in b.insts.iter().enumerate() {
                if let Some(d) = inst.kind.dst() {
                    def_site.insert(d, (bi, ii));
                }
            }
        }
        let params: HashSet<&str> = self.f.params.iter().map(|p| p.name.as_str()).collect();

        for (bi, b) in self.f.blocks.iter().enumerate() {
            if !reachable[bi] {
                continue;
            }
            for (ii, inst) in b.insts.iter().enumerate() {
                for op in inst.kind.operands() {
                    let Operand::Reg(r) = op else { continue };
                    if params.contains(r.as_str()) {
                        continue;
                    }
                    let Some(&(dbi, dii)) = def_site.get(r.as_str()) else {
                        continue; // undefined: reported at parse
                    };
                    let ok = if dbi == bi { dii < ii } else { dominates(dbi, bi) };
                    if !ok {
                        self.diags.push(Diagnostic::new(
                            DiagKind::DominanceViolation,
                            inst.loc,
                            format!("'%{r}' does not dominate this use"),
                        ));
                    }
                }
            }
        }
    }

    fn run(mut self) -> Vec<Diagnostic> {
        self.reg_ty = self.f.params.iter().map(|p| (p.name.as_str(), p.ty)).collect();
        for b in &self.f.blocks {
            for inst in &b.insts {
                if let Some(dst) = inst.kind.dst() {
                    let ty = match &inst.kind {
                        InstKind::Const { ty, .. } => *ty,
                        InstKind::Alloca { .. } | InstKind::SecretAlloca { .. } => Ty::Ptr,
                        InstKind::Load { ty, .. } => *ty,
                        InstKind::Gep { .. } => Ty::Ptr,
                        InstKind::Bin { ty, .. } => *ty,
                        InstKind::Icmp { .. } => Ty::I64,
                        InstKind::Select { ty, .. } => *ty,
                        InstKind::Call { ret_ty, .. } => ret_ty.unwrap_or(Ty::I64),
                        _ => Ty::I64,
                    };
                    self.reg_ty.insert(dst, ty);
                }
            }
        }
        self.check_blocks();
        self.check_rets();
        for b in &self.f.blocks {
            for inst in &b.insts {
                self.check_inst(inst);
            }
        }
        self.check_dominance();
        self.diags
    }
}

/// Validate a parsed program. An empty result means every structural
/// invariant holds and the program is executable.
pub fn validate(p: &Program) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    for g in &p.globals {
        if g.init.len() as u64 != g.size {
            diags.push(Diagnostic::new(
                DiagKind::InvalidAttribute,
                g.loc,
                format!(
                    "global '@{}' declares {} bytes but initializer has {}",
                    g.name,
                    g.size,
                    g.init.len()
                ),
            ));
        }
        if g.size == 0 {
            diags.push(Diagnostic::new(
                DiagKind::InvalidAttribute,
                g.loc,
                format!("global '@{}' has zero size", g.name),
            ));
        }
    }

    match p.function(&p.entry) {
        None => {
            if !p.functions.is_empty() || !p.globals.is_empty() {
                diags.push(Diagnostic::new(
                    DiagKind::MissingEntry,
                    Loc::default(),
                    format!("entry function '@{}' is not defined", p.entry),
                ));
            }
        }
        Some(main) => {
            let ok_params = main.params.is_empty()
                || (main.params.len() == 2
                    && main.params[0].ty == Ty::Ptr
                    && main.params[1].ty == Ty::I64);
            if !ok_params {
                diags.push(Diagnostic::new(
                    DiagKind::ArityMismatch,
                    main.loc,
                    "entry function must take () or (ptr, i64)",
                ));
            }
            if main.ret_ty() != Some(Ty::I64) {
                diags.push(Diagnostic::new(
                    DiagKind::TypeMismatch,
                    main.loc,
                    "entry function must return i64",
                ));
            }
        }
    }

    for f in &p.functions {
        let checker = FnChecker { p, f, reg_ty: HashMap::new(), diags: Vec::new() };
        diags.extend(checker.run());
    }
    diags
}

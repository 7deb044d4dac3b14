//! Canonical printer. `parse_program(print_program(p))` reconstructs a
//! structurally equal program; goldens diff cleanly because every field is
//! printed explicitly and deterministically.

use super::*;
use std::fmt::Write;

fn fmt_imm(v: u128) -> String {
    if v < 10 {
        format!("{v}")
    } else {
        format!("0x{v:x}")
    }
}

fn fmt_operand(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => format!("%{r}"),
        Operand::Imm(v) => fmt_imm(*v),
        Operand::Global(g) => format!("@{g}"),
    }
}

fn fmt_inst(inst: &Inst) -> String {
    match &inst.kind {
        InstKind::Const { dst, ty, value } => {
            format!("%{dst} = const {} {}", ty.name(), fmt_imm(*value))
        }
        InstKind::Alloca { dst, ty, count, align, secret } => {
            let mut s = format!("%{dst} = alloca {}, {count}, align {align}", ty.name());
            if *secret {
                s.push_str(", secret");
            }
            s
        }
        InstKind::SecretAlloca { dst, ty, count, align } => {
            format!("%{dst} = secret_alloca {}, {count}, align {align}", ty.name())
        }
        InstKind::Load { dst, ty, addr, align } => {
            format!("%{dst} = load {}, ptr {}, align {align}", ty.name(), fmt_operand(addr))
        }
        InstKind::Store { ty, value, addr, align } => {
            format!(
                "store {} {}, ptr {}, align {align}",
                ty.name(),
                fmt_operand(value),
                fmt_operand(addr)
            )
        }
        InstKind::Gep { dst, ty, base, index } => {
            format!(
                "%{dst} = gep {}, ptr {}, {}",
                ty.name(),
                fmt_operand(base),
                fmt_operand(index)
            )
        }
        InstKind::Bin { dst, op, ty, lhs, rhs } => {
            format!(
                "%{dst} = {} {} {}, {}",
                op.name(),
                ty.name(),
                fmt_operand(lhs),
                fmt_operand(rhs)
            )
        }
        InstKind::Icmp { dst, cond, ty, lhs, rhs } => {
            format!(
                "%{dst} = icmp {} {} {}, {}",
                cond.name(),
                ty.name(),
                fmt_operand(lhs),
                fmt_operand(rhs)
            )
        }
        InstKind::Select { dst, ty, cond, then_v, else_v } => {
            format!(
                "%{dst} = select {} {}, {}, {}",
                ty.name(),
                fmt_operand(cond),
                fmt_operand(then_v),
                fmt_operand(else_v)
            )
        }
        InstKind::Call { dst, ret_ty, callee, args } => {
            let args_s = args
                .iter()
                .map(|(ty, op)| format!("{} {}", ty.name(), fmt_operand(op)))
                .collect::<Vec<_>>()
                .join(", ");
            match (dst, ret_ty) {
                (Some(d), Some(ty)) => format!("%{d} = call {} @{callee}({args_s})", ty.name()),
                _ => format!("call void @{callee}({args_s})"),
            }
        }
        InstKind::Br { target } => format!("br {target}"),
        InstKind::CondBr { cond, then_l, else_l } => {
            format!("condbr {}, {then_l}, {else_l}", fmt_operand(cond))
        }
        InstKind::Ret { value: Some((ty, v)) } => {
            format!("ret {} {}", ty.name(), fmt_operand(v))
        }
        InstKind::Ret { value: None } => "ret void".into(),
    }
}

/// Render a program in canonical text form.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    if let Some(meta) = &p.meta {
        let _ = writeln!(
            out,
            "transformed policy={} prefix=0x{:08x}",
            meta.policy.name(),
            meta.prefix
        );
    }
    for g in &p.globals {
        let mut hex = String::with_capacity(2 + g.init.len() * 2);
        hex.push_str("0x");
        for b in &g.init {
            let _ = write!(hex, "{b:02x}");
        }
        let secret = if g.secret { " secret" } else { "" };
        let _ = writeln!(out, "global {} : {} = {}{}", g.name, g.size, hex, secret);
    }
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 || !p.globals.is_empty() || p.meta.is_some() {
            out.push('\n');
        }
        let params = f
            .params
            .iter()
            .map(|p| format!("%{}: {}", p.name, p.ty.name()))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(out, "fn {}({}) {{", f.name, params);
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.label);
            for inst in &b.insts {
                let _ = writeln!(out, "  {}", fmt_inst(inst));
            }
        }
        out.push_str("}\n");
    }
    out
}

//! Deterministic interpreter.
//!
//! Programs execute against a [`MemoryImage`] with tagged-address fault
//! semantics: any raw load or store whose address has bits 48..64 set
//! faults, which is what makes an untransformed access to secret memory
//! crash instead of leaking. The interpreter records per-opcode instruction
//! counts, runtime work ticks, a store-event log for the coverage audit,
//! and fires audit-point callbacks for the prefetcher oracle.

use crate::ir::{BinOp, IcmpCond, Inst, InstKind, Loc, Operand, Program, Ty};
use crate::mem::{self, AccessError, MemoryImage, RangeKind};
use crate::runtime::{self, Runtime, RuntimeError, RuntimeStats};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

pub const DEFAULT_STEP_LIMIT: u64 = 100_000_000;
pub const DEFAULT_CALL_DEPTH: usize = 256;

/// When the prefetcher oracle gets to look at memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditPolicy {
    /// After every split store and at program end (the default).
    EveryStore,
    /// Every N executed instructions and at program end.
    EveryN(u64),
    /// Only at program end.
    EndOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditPoint {
    AfterSplitStore,
    Periodic,
    End,
}

#[derive(Debug, Clone)]
pub struct VmConfig {
    pub step_limit: u64,
    pub audit: AuditPolicy,
    /// Overrides the prefix from the program's transform marker.
    pub prefix: Option<u32>,
    pub call_depth_limit: usize,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            step_limit: DEFAULT_STEP_LIMIT,
            audit: AuditPolicy::EveryStore,
            prefix: None,
            call_depth_limit: DEFAULT_CALL_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FaultKind {
    NonCanonicalAccess { addr: u64 },
    Unmapped { addr: u64 },
    StepLimit,
    CallDepthExceeded,
    StackOverflow,
    Runtime(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub loc: Loc,
}

/// One store observed during execution, for the coverage audit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StoreEvent {
    /// True when the store went through the split path.
    pub split: bool,
    /// Untagged address of the access.
    pub addr: u64,
    pub size: u64,
    pub value_tainted: bool,
    /// True when the target lies in a range annotated as secret.
    pub designated_target: bool,
    /// For split stores: the touched slots still carried the prefix.
    pub prefix_ok: bool,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct ExecTrace {
    pub icount_by_opcode: BTreeMap<&'static str, u64>,
    pub runtime_ticks: u64,
    pub out: Vec<u8>,
    pub exit: Option<u64>,
    pub fault: Option<Fault>,
    pub uninit_reads: u64,
    pub store_events: Vec<StoreEvent>,
    pub peak_mapped_bytes: u64,
    pub audit_points: u64,
    pub shadow_entries_at_exit: usize,
    pub stats: RuntimeStats,
}

impl ExecTrace {
    /// Executed IR instructions plus runtime work: the performance proxy.
    pub fn total_cost(&self) -> u64 {
        self.icount_by_opcode.values().sum::<u64>() + self.runtime_ticks
    }

    pub fn icount(&self) -> u64 {
        self.icount_by_opcode.values().sum()
    }

    pub fn split_store_count(&self) -> u64 {
        self.store_events.iter().filter(|e| e.split).count() as u64
    }

    pub fn to_json(&self) -> serde_json::Value {
        let out_hex: String = self.out.iter().map(|b| format!("{b:02x}")).collect();
        serde_json::json!({
            "icount_by_opcode": self.icount_by_opcode,
            "icount": self.icount(),
            "runtime_ticks": self.runtime_ticks,
            "total_cost": self.total_cost(),
            "faults": self.fault.iter().collect::<Vec<_>>(),
            "out_hex": out_hex,
            "exit": self.exit,
            "uninit_reads": self.uninit_reads,
            "peak_mapped_bytes": self.peak_mapped_bytes,
            "audit_points": self.audit_points,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Value {
    ty: Ty,
    bits: u128,
    taint: bool,
}

impl Value {
    fn new(ty: Ty, bits: u128, taint: bool) -> Self {
        Value { ty, bits: bits & ty.mask(), taint }
    }

    fn addr(&self) -> u64 {
        self.bits as u64
    }
}

struct Frame {
    fidx: usize,
    bidx: usize,
    iidx: usize,
    regs: HashMap<String, Value>,
    ret_dst: Option<String>,
    sp_base: u64,
    stack_ranges: Vec<u64>,
}

struct ControlError(FaultKind);

impl From<AccessError> for ControlError {
    fn from(e: AccessError) -> Self {
        ControlError(match e {
            AccessError::NonCanonical(a) => FaultKind::NonCanonicalAccess { addr: a },
            AccessError::Unmapped(a) => FaultKind::Unmapped { addr: a },
        })
    }
}

impl From<RuntimeError> for ControlError {
    fn from(e: RuntimeError) -> Self {
        ControlError(FaultKind::Runtime(e.to_string()))
    }
}

enum Flow {
    Next,
    Jump(usize),
    Return(Option<Value>),
}

struct Vm<'p> {
    prog: &'p Program,
    fn_idx: HashMap<&'p str, usize>,
    label_idx: Vec<HashMap<&'p str, usize>>,
    globals: HashMap<&'p str, (u64, bool)>,
    image: MemoryImage,
    rt: Runtime,
    frames: Vec<Frame>,
    sp: u64,
    cfg: VmConfig,
    steps: u64,
    icount: BTreeMap<&'static str, u64>,
    out: Vec<u8>,
    store_events: Vec<StoreEvent>,
    audit_points: u64,
}

/// Execute a program with default (no-op) audit observation.
pub fn run(p: &Program, args: &[u8], cfg: &VmConfig) -> ExecTrace {
    run_with_observer(p, args, cfg, |_, _| {})
}

/// Execute a program, calling `observer` with the live memory image at
/// each audit point selected by the config.
pub fn run_with_observer(
    p: &Program,
    args: &[u8],
    cfg: &VmConfig,
    mut observer: impl FnMut(&MemoryImage, AuditPoint),
) -> ExecTrace {
    let vm = Vm::new(p, args, cfg.clone());
    vm.exec(&mut observer)
}

impl<'p> Vm<'p> {
    fn new(p: &'p Program, args: &[u8], cfg: VmConfig) -> Self {
        let prefix = cfg
            .prefix
            .or(p.meta.map(|m| m.prefix))
            .unwrap_or(runtime::DEFAULT_PREFIX);
        let mut image = MemoryImage::new();

        if !args.is_empty() {
            image.map_range(mem::ARGS_BASE, mem::ARGS_BASE + args.len() as u64, RangeKind::Args);
            image.write_bytes(mem::ARGS_BASE, args, false);
        }

        let mut globals = HashMap::new();
        let mut cursor = mem::GLOBALS_BASE;
        for g in &p.globals {
            let cap = runtime::ceil_to_8(g.size).max(8);
            image.map_range(cursor, cursor + cap, RangeKind::Globals);
            if g.secret {
                // the constructor emitted by the transform initializes these
                image.designate(cursor, cursor + cap);
            } else {
                image.write_bytes(cursor, &g.init, false);
            }
            globals.insert(g.name.as_str(), (cursor, g.secret));
            cursor += cap.div_ceil(16) * 16;
        }

        let fn_idx: HashMap<&str, usize> =
            p.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
        let label_idx = p
            .functions
            .iter()
            .map(|f| {
                f.blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (b.label.as_str(), i))
                    .collect::<HashMap<_, _>>()
            })
            .collect();

        Vm {
            prog: p,
            fn_idx,
            label_idx,
            globals,
            image,
            rt: Runtime::new(prefix),
            frames: Vec::new(),
            sp: mem::STACK_TOP,
            cfg,
            steps: 0,
            icount: BTreeMap::new(),
            out: Vec::new(),
            store_events: Vec::new(),
            audit_points: 0,
        }
    }

    fn finish(mut self, exit: Option<u64>, fault: Option<Fault>) -> ExecTrace {
        ExecTrace {
            icount_by_opcode: self.icount,
            runtime_ticks: self.rt.stats.ticks,
            out: std::mem::take(&mut self.out),
            exit,
            fault,
            uninit_reads: self.image.uninit_reads,
            store_events: std::mem::take(&mut self.store_events),
            peak_mapped_bytes: self.image.peak_mapped_bytes(),
            audit_points: self.audit_points,
            shadow_entries_at_exit: self.rt.shadow_map().len(),
            stats: self.rt.stats.clone(),
        }
    }

    fn exec(mut self, observer: &mut impl FnMut(&MemoryImage, AuditPoint)) -> ExecTrace {
        let prog = self.prog;
        let Some(&main_idx) = self.fn_idx.get(self.prog.entry.as_str()) else {
            return self.finish(None, None);
        };
        let main = &prog.functions[main_idx];
        let mut regs = HashMap::new();
        if main.params.len() == 2 {
            let args_len = self
                .image
                .range_containing(mem::ARGS_BASE)
                .map(|(s, i)| i.end - s)
                .unwrap_or(0);
            regs.insert(main.params[0].name.clone(), Value::new(Ty::Ptr, mem::ARGS_BASE as u128, false));
            regs.insert(main.params[1].name.clone(), Value::new(Ty::I64, args_len as u128, false));
        }
        self.frames.push(Frame {
            fidx: main_idx,
            bidx: 0,
            iidx: 0,
            regs,
            ret_dst: None,
            sp_base: self.sp,
            stack_ranges: Vec::new(),
        });

        loop {
            let frame = self.frames.last().expect("frame stack never empty while running");
            let func = &prog.functions[frame.fidx];
            let inst: &'p Inst = &func.blocks[frame.bidx].insts[frame.iidx];

            if self.steps >= self.cfg.step_limit {
                let loc = inst.loc;
                return self.finish(None, Some(Fault { kind: FaultKind::StepLimit, loc }));
            }
            self.steps += 1;
            *self.icount.entry(inst.kind.opcode_name()).or_insert(0) += 1;

            match self.step(inst, observer) {
                Ok(Flow::Next) => {
                    self.frames.last_mut().unwrap().iidx += 1;
                }
                Ok(Flow::Jump(b)) => {
                    let f = self.frames.last_mut().unwrap();
                    f.bidx = b;
                    f.iidx = 0;
                }
                Ok(Flow::Return(v)) => {
                    let done = self.frames.len() == 1;
                    if done {
                        let exit = v.map(|v| v.bits as u64).unwrap_or(0);
                        self.audit_points += 1;
                        observer(&self.image, AuditPoint::End);
                        return self.finish(Some(exit), None);
                    }
                    let frame = self.frames.pop().unwrap();
                    for start in frame.stack_ranges.iter().rev() {
                        self.image.unmap_range(*start);
                    }
                    self.sp = frame.sp_base;
                    let caller = self.frames.last_mut().unwrap();
                    if let (Some(dst), Some(v)) = (frame.ret_dst, v) {
                        caller.regs.insert(dst, v);
                    }
                    caller.iidx += 1;
                }
                Err(ControlError(kind)) => {
                    let loc = inst.loc;
                    self.audit_points += 1;
                    observer(&self.image, AuditPoint::End);
                    return self.finish(None, Some(Fault { kind, loc }));
                }
            }

            if let AuditPolicy::EveryN(n) = self.cfg.audit {
                if n > 0 && self.steps % n == 0 {
                    self.audit_points += 1;
                    observer(&self.image, AuditPoint::Periodic);
                }
            }
        }
    }

    fn eval(&self, op: &Operand, ty: Ty) -> Value {
        match op {
            Operand::Imm(v) => Value::new(ty, *v, false),
            Operand::Global(g) => {
                let (addr, secret) = self.globals.get(g.as_str()).copied().unwrap_or((0, false));
                let addr = if secret { runtime::set_tag(addr) } else { addr };
                Value::new(Ty::Ptr, addr as u128, false)
            }
            Operand::Reg(r) => *self
                .frames
                .last()
                .unwrap()
                .regs
                .get(r.as_str())
                .unwrap_or_else(|| panic!("undefined register %{r} (program not validated)")),
        }
    }

    fn set_reg(&mut self, dst: &str, v: Value) {
        self.frames.last_mut().unwrap().regs.insert(dst.to_string(), v);
    }

    fn raw_store(&mut self, addr: u64, bytes: &[u8], taint: bool) -> Result<(), ControlError> {
        self.image.check_access(addr, bytes.len() as u64)?;
        self.image.write_bytes(addr, bytes, taint);
        Ok(())
    }

    fn raw_load(&mut self, addr: u64, len: u64) -> Result<(Vec<u8>, bool), ControlError> {
        self.image.check_access(addr, len)?;
        let designated = self.image.is_designated(addr);
        let (bytes, taint) = self.image.read_bytes(addr, len);
        Ok((bytes, taint || designated))
    }

    fn push_store_event(&mut self, ev: StoreEvent) {
        self.store_events.push(ev);
    }

    fn alloca(
        &mut self,
        size: u64,
        align: u64,
        secret_attr: bool,
        split: bool,
    ) -> Result<u64, ControlError> {
        let cap = if split { runtime::ceil_to_8(size) } else { size };
        let align = align.max(8);
        let base = (self.sp.saturating_sub(cap)) & !(align - 1);
        if base < mem::STACK_LIMIT {
            return Err(ControlError(FaultKind::StackOverflow));
        }
        self.sp = base;
        self.image.map_range(base, base + cap, RangeKind::Stack);
        self.frames.last_mut().unwrap().stack_ranges.push(base);
        if secret_attr {
            // annotation is visible even when the program runs untransformed
            self.image.designate(base, base + cap);
        }
        Ok(base)
    }

    fn step(
        &mut self,
        inst: &'p Inst,
        observer: &mut impl FnMut(&MemoryImage, AuditPoint),
    ) -> Result<Flow, ControlError> {
        match &inst.kind {
            InstKind::Const { dst, ty, value } => {
                self.set_reg(dst, Value::new(*ty, *value, false));
                Ok(Flow::Next)
            }
            InstKind::Alloca { dst, ty, count, align, secret } => {
                let size = ty.size() * count;
                let base = self.alloca(size, *align, *secret, false)?;
                self.set_reg(dst, Value::new(Ty::Ptr, base as u128, false));
                Ok(Flow::Next)
            }
            InstKind::SecretAlloca { dst, ty, count, align } => {
                let size = ty.size() * count;
                let base = self.alloca(size, *align, false, true)?;
                let tagged = self.rt.register_stack_secret(&mut self.image, base, size)?;
                self.set_reg(dst, Value::new(Ty::Ptr, tagged as u128, false));
                Ok(Flow::Next)
            }
            InstKind::Load { dst, ty, addr, .. } => {
                let a = self.eval(addr, Ty::Ptr).addr();
                let (bytes, taint) = self.raw_load(a, ty.size())?;
                let mut bits = 0u128;
                for (i, &b) in bytes.iter().enumerate() {
                    bits |= (b as u128) << (8 * i);
                }
                self.set_reg(dst, Value::new(*ty, bits, taint));
                Ok(Flow::Next)
            }
            InstKind::Store { ty, value, addr, .. } => {
                let v = self.eval(value, *ty);
                let a = self.eval(addr, Ty::Ptr).addr();
                let bytes = le_bytes(v.bits, ty.size());
                self.raw_store(a, &bytes, v.taint)?;
                let designated_target = self.image.is_designated(a);
                self.push_store_event(StoreEvent {
                    split: false,
                    addr: a,
                    size: ty.size(),
                    value_tainted: v.taint,
                    designated_target,
                    prefix_ok: true,
                });
                Ok(Flow::Next)
            }
            InstKind::Gep { dst, ty, base, index } => {
                let b = self.eval(base, Ty::Ptr);
                let i = self.eval(index, Ty::I64);
                let off = (i.bits as u64 as i64).wrapping_mul(ty.size() as i64);
                let addr = b.addr().wrapping_add(off as u64);
                self.set_reg(dst, Value { ty: Ty::Ptr, bits: addr as u128, taint: b.taint | i.taint });
                Ok(Flow::Next)
            }
            InstKind::Bin { dst, op, ty, lhs, rhs } => {
                let a = self.eval(lhs, *ty);
                let b = self.eval(rhs, *ty);
                let bits = eval_bin(*op, *ty, a.bits, b.bits);
                self.set_reg(dst, Value::new(*ty, bits, a.taint | b.taint));
                Ok(Flow::Next)
            }
            InstKind::Icmp { dst, cond, ty, lhs, rhs } => {
                let a = self.eval(lhs, *ty);
                let b = self.eval(rhs, *ty);
                let r = eval_icmp(*cond, *ty, a.bits, b.bits);
                self.set_reg(dst, Value::new(Ty::I64, r as u128, a.taint | b.taint));
                Ok(Flow::Next)
            }
            InstKind::Select { dst, ty, cond, then_v, else_v } => {
                let c = self.eval(cond, Ty::I64);
                let v = if c.bits != 0 { self.eval(then_v, *ty) } else { self.eval(else_v, *ty) };
                self.set_reg(dst, Value::new(*ty, v.bits, c.taint | v.taint));
                Ok(Flow::Next)
            }
            InstKind::Br { target } => {
                let frame = self.frames.last().unwrap();
                Ok(Flow::Jump(self.label_idx[frame.fidx][target.as_str()]))
            }
            InstKind::CondBr { cond, then_l, else_l } => {
                let c = self.eval(cond, Ty::I64);
                let frame = self.frames.last().unwrap();
                let l = if c.bits != 0 { then_l } else { else_l };
                Ok(Flow::Jump(self.label_idx[frame.fidx][l.as_str()]))
            }
            InstKind::Ret { value } => {
                let v = value.as_ref().map(|(ty, op)| self.eval(op, *ty));
                Ok(Flow::Return(v))
            }
            InstKind::Call { dst, ret_ty, callee, args } => {
                if let Some(&fidx) = self.fn_idx.get(callee.as_str()) {
                    if self.frames.len() >= self.cfg.call_depth_limit {
                        return Err(ControlError(FaultKind::CallDepthExceeded));
                    }
                    let func = &self.prog.functions[fidx];
                    let mut regs = HashMap::new();
                    for (param, (ty, op)) in func.params.iter().zip(args.iter()) {
                        regs.insert(param.name.clone(), self.eval(op, *ty));
                    }
                    self.frames.push(Frame {
                        fidx,
                        bidx: 0,
                        iidx: 0,
                        regs,
                        ret_dst: dst.clone(),
                        sp_base: self.sp,
                        stack_ranges: Vec::new(),
                    });
                    // execution continues in the callee; returning advances us
                    Ok(Flow::Jump(0))
                } else {
                    let vals: Vec<Value> =
                        args.iter().map(|(ty, op)| self.eval(op, *ty)).collect();
                    let ret = self.intrinsic(callee, &vals, *ret_ty, observer)?;
                    if let (Some(dst), Some(v)) = (dst, ret) {
                        let dst = dst.clone();
                        self.set_reg(&dst, v);
                    }
                    Ok(Flow::Next)
                }
            }
        }
    }

    fn audit_split_store(&mut self, observer: &mut impl FnMut(&MemoryImage, AuditPoint)) {
        if self.cfg.audit == AuditPolicy::EveryStore {
            self.audit_points += 1;
            observer(&self.image, AuditPoint::AfterSplitStore);
        }
    }

    fn ss_store(
        &mut self,
        size: u64,
        args: &[Value],
        observer: &mut impl FnMut(&MemoryImage, AuditPoint),
    ) -> Result<(), ControlError> {
        let addr = args[0].addr();
        let v = args[1];
        let bytes = le_bytes(v.bits, size);
        if runtime::is_secret(addr) {
            self.rt.split_store(&mut self.image, addr, &bytes)?;
            let prefix_ok = self.rt.slots_prefixed(&self.image, addr);
            self.push_store_event(StoreEvent {
                split: true,
                addr: runtime::clear_tag(addr),
                size,
                value_tainted: v.taint,
                designated_target: true,
                prefix_ok,
            });
            self.audit_split_store(observer);
        } else {
            // untouched fast path: an ordinary store
            self.rt.stats.ticks += 1 + size.div_ceil(8);
            self.raw_store(addr, &bytes, v.taint)?;
            let designated_target = self.image.is_designated(addr);
            self.push_store_event(StoreEvent {
                split: false,
                addr,
                size,
                value_tainted: v.taint,
                designated_target,
                prefix_ok: true,
            });
        }
        Ok(())
    }

    fn ss_load(&mut self, size: u64, args: &[Value], ret_ty: Option<Ty>) -> Result<Value, ControlError> {
        let addr = args[0].addr();
        let ty = ret_ty.expect("ss_load declares a return type");
        if runtime::is_secret(addr) {
            let (bytes, taint) = self.rt.split_load(&mut self.image, addr, size)?;
            let mut bits = 0u128;
            for (i, &b) in bytes.iter().enumerate() {
                bits |= (b as u128) << (8 * i);
            }
            Ok(Value::new(ty, bits, taint))
        } else {
            self.rt.stats.ticks += 1 + size.div_ceil(8);
            let (bytes, taint) = self.raw_load(addr, size)?;
            let mut bits = 0u128;
            for (i, &b) in bytes.iter().enumerate() {
                bits |= (b as u128) << (8 * i);
            }
            Ok(Value::new(ty, bits, taint))
        }
    }

    fn intrinsic(
        &mut self,
        name: &str,
        args: &[Value],
        ret_ty: Option<Ty>,
        observer: &mut impl FnMut(&MemoryImage, AuditPoint),
    ) -> Result<Option<Value>, ControlError> {
        match name {
            "malloc" => {
                let n = args[0].addr();
                if n == 0 {
                    return Err(RuntimeError::ZeroSizeAllocation.into());
                }
                self.rt.stats.ticks += 2;
                let base = self
                    .image
                    .alloc_heap(n)
                    .ok_or(ControlError(FaultKind::Runtime(
                        RuntimeError::OutOfSimulatedMemory.to_string(),
                    )))?;
                Ok(Some(Value::new(Ty::Ptr, base as u128, false)))
            }
            "free" => {
                let p = args[0].addr();
                self.rt.stats.ticks += 2;
                match self.image.range_containing(p) {
                    Some((start, info)) if start == p && info.kind == RangeKind::Heap => {
                        self.image.unmap_range(p);
                        Ok(None)
                    }
                    _ => Err(RuntimeError::DoubleFree(p).into()),
                }
            }
            // Untransformed annotation wrappers behave as a plain heap,
            // but remember the secrecy designation for the oracle.
            "secret_malloc" => {
                let n = args[0].addr();
                if n == 0 {
                    return Err(RuntimeError::ZeroSizeAllocation.into());
                }
                self.rt.stats.ticks += 2;
                let base = self
                    .image
                    .alloc_heap(n)
                    .ok_or(ControlError(FaultKind::Runtime(
                        RuntimeError::OutOfSimulatedMemory.to_string(),
                    )))?;
                self.image.designate(base, base + n);
                Ok(Some(Value::new(Ty::Ptr, base as u128, false)))
            }
            "secret_free" => {
                let p = args[0].addr();
                self.rt.stats.ticks += 2;
                match self.image.range_containing(p) {
                    Some((start, info)) if start == p && info.kind == RangeKind::Heap => {
                        self.image.unmap_range(p);
                        Ok(None)
                    }
                    _ => Err(RuntimeError::DoubleFree(p).into()),
                }
            }
            "memcpy" => {
                let (dst, src, n) = (args[0].addr(), args[1].addr(), args[2].addr());
                self.image.check_access(src, n)?;
                self.image.check_access(dst, n)?;
                self.rt.stats.ticks += 1 + n.div_ceil(8) * 2;
                for i in 0..n {
                    let (b, t) = self.image.read_byte(src + i);
                    self.image.write_byte(dst + i, b, t);
                }
                Ok(None)
            }
            "memset" => {
                let (dst, v, n) = (args[0].addr(), args[1], args[2].addr());
                self.image.check_access(dst, n)?;
                self.rt.stats.ticks += 1 + n.div_ceil(8);
                for i in 0..n {
                    self.image.write_byte(dst + i, v.bits as u8, v.taint);
                }
                Ok(None)
            }
            "memcmp" => {
                let (a, b, n) = (args[0].addr(), args[1].addr(), args[2].addr());
                self.image.check_access(a, n)?;
                self.image.check_access(b, n)?;
                self.rt.stats.ticks += 1 + n.div_ceil(4);
                let taint = self.image.is_designated(a) || self.image.is_designated(b);
                let mut r = 0i64;
                let mut byte_taint = false;
                for i in 0..n {
                    let (x, tx) = self.image.read_byte(a + i);
                    let (y, ty) = self.image.read_byte(b + i);
                    byte_taint |= tx | ty;
                    if x != y {
                        r = if x < y { -1 } else { 1 };
                        break;
                    }
                }
                Ok(Some(Value::new(Ty::I64, r as u64 as u128, taint | byte_taint)))
            }
            "write_out" => {
                let (p, n) = (args[0].addr(), args[1].addr());
                self.image.check_access(p, n)?;
                self.rt.stats.ticks += 1 + n.div_ceil(8);
                let (bytes, _) = self.image.read_bytes(p, n);
                self.out.extend_from_slice(&bytes);
                Ok(None)
            }
            "ss_store8" => self.ss_store(1, args, observer).map(|_| None),
            "ss_store16" => self.ss_store(2, args, observer).map(|_| None),
            "ss_store32" => self.ss_store(4, args, observer).map(|_| None),
            "ss_store64" => self.ss_store(8, args, observer).map(|_| None),
            "ss_store128" => self.ss_store(16, args, observer).map(|_| None),
            "ss_load8" => self.ss_load(1, args, ret_ty).map(Some),
            "ss_load16" => self.ss_load(2, args, ret_ty).map(Some),
            "ss_load32" => self.ss_load(4, args, ret_ty).map(Some),
            "ss_load64" => self.ss_load(8, args, ret_ty).map(Some),
            "ss_load128" => self.ss_load(16, args, ret_ty).map(Some),
            "ss_secret_malloc" => {
                let tagged = self.rt.secret_malloc(&mut self.image, args[0].addr())?;
                Ok(Some(Value::new(Ty::Ptr, tagged as u128, false)))
            }
            "ss_secret_free" => {
                self.rt.secret_free(&mut self.image, args[0].addr())?;
                Ok(None)
            }
            "ss_is_secret" => {
                let flag = runtime::is_secret(args[0].addr()) as u128;
                Ok(Some(Value::new(Ty::I64, flag, args[0].taint)))
            }
            "ss_frame_push" => {
                self.rt.frame_push();
                Ok(None)
            }
            "ss_frame_pop" => {
                self.rt.frame_pop(&mut self.image)?;
                Ok(None)
            }
            "ss_declassify" => {
                let (dst, src, n) = (args[0].addr(), args[1].addr(), args[2].addr());
                let bytes = self.rt.declassify_region(&mut self.image, src, n)?;
                self.image.check_access(dst, n)?;
                // declassified output is plain: taint cleared by contract
                self.image.write_bytes(dst, &bytes, false);
                self.rt.stats.ticks += n.div_ceil(8);
                Ok(None)
            }
            "ss_classify" => {
                let (dst, src, n) = (args[0].addr(), args[1].addr(), args[2].addr());
                self.image.check_access(src, n)?;
                let (bytes, _) = self.image.read_bytes(src, n);
                self.rt.classify_region(&mut self.image, dst, &bytes)?;
                Ok(None)
            }
            "ss_register_global" => {
                let (p, n) = (args[0].addr(), args[1].addr());
                self.rt.register_global_secret(&mut self.image, p, n)?;
                Ok(None)
            }
            "ss_memcpy" => {
                let (dst, src, n) = (args[0].addr(), args[1].addr(), args[2].addr());
                self.rt.stats.ticks += 1;
                for i in 0..n {
                    let (b, t) = self.rt.logical_read_byte(&mut self.image, src.wrapping_add(i))?;
                    self.rt.logical_write_byte(&mut self.image, dst.wrapping_add(i), b, t)?;
                }
                Ok(None)
            }
            "ss_memset" => {
                let (dst, v, n) = (args[0].addr(), args[1], args[2].addr());
                self.rt.stats.ticks += 1;
                for i in 0..n {
                    self.rt.logical_write_byte(
                        &mut self.image,
                        dst.wrapping_add(i),
                        v.bits as u8,
                        v.taint,
                    )?;
                }
                Ok(None)
            }
            "ss_memcmp" => {
                let (a, b, n) = (args[0].addr(), args[1].addr(), args[2].addr());
                self.rt.stats.ticks += 1;
                let mut r = 0i64;
                let mut taint = false;
                for i in 0..n {
                    let (x, tx) = self.rt.logical_read_byte(&mut self.image, a.wrapping_add(i))?;
                    let (y, ty) = self.rt.logical_read_byte(&mut self.image, b.wrapping_add(i))?;
                    taint |= tx | ty;
                    if x != y {
                        r = if x < y { -1 } else { 1 };
                        break;
                    }
                }
                Ok(Some(Value::new(Ty::I64, r as u64 as u128, taint)))
            }
            "ss_write_out" => {
                let (p, n) = (args[0].addr(), args[1].addr());
                // conversion back to the plain format happens here, at the
                // boundary, so split data never reaches the output raw
                let bytes = self.rt.declassify_region(&mut self.image, p, n)?;
                self.out.extend_from_slice(&bytes);
                Ok(None)
            }
            other => Err(ControlError(FaultKind::Runtime(format!(
                "unknown intrinsic @{other}"
            )))),
        }
    }
}

fn le_bytes(bits: u128, size: u64) -> Vec<u8> {
    bits.to_le_bytes()[..size as usize].to_vec()
}

fn eval_bin(op: BinOp, ty: Ty, a: u128, b: u128) -> u128 {
    let bits = ty.bits();
    match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::Xor => a ^ b,
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Shl => {
            if b >= bits as u128 {
                0
            } else {
                a << b
            }
        }
        BinOp::Lshr => {
            if b >= bits as u128 {
                0
            } else {
                a >> b
            }
        }
    }
}

fn sign_extend(v: u128, ty: Ty) -> i128 {
    let bits = ty.bits();
    if bits == 128 {
        v as i128
    } else {
        let shift = 128 - bits;
        ((v << shift) as i128) >> shift
    }
}

fn eval_icmp(cond: IcmpCond, ty: Ty, a: u128, b: u128) -> u64 {
    let (sa, sb) = (sign_extend(a, ty), sign_extend(b, ty));
    let r = match cond {
        IcmpCond::Eq => a == b,
        IcmpCond::Ne => a != b,
        IcmpCond::Ult => a < b,
        IcmpCond::Ule => a <= b,
        IcmpCond::Ugt => a > b,
        IcmpCond::Uge => a >= b,
        IcmpCond::Slt => sa < sb,
        IcmpCond::Sle => sa <= sb,
        IcmpCond::Sgt => sa > sb,
        IcmpCond::Sge => sa >= sb,
    };
    r as u64
}

/// Opcode names the trace may contain, for table-driven consumers.
pub fn opcode_names() -> &'static [&'static str] {
    &[
        "const", "alloca", "secret_alloca", "load", "store", "gep", "add", "sub", "xor", "and",
        "or", "shl", "lshr", "mul", "icmp", "select", "call", "br", "condbr", "ret",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, PolicyMode};
    use crate::transform::{transform_program, Policy};

    fn parse(src: &str) -> Program {
        let p = parse_program(src).unwrap();
        assert!(crate::ir::validate(&p).is_empty(), "test program must validate");
        p
    }

    fn ctswap() -> Program {
        let text =
            std::fs::read_to_string(crate::corpus::default_dir().join("ctswap.ir")).unwrap();
        parse(&text)
    }

    fn ctswap_args(cond: u64, a: u64, b: u64) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&cond.to_le_bytes());
        v.extend_from_slice(&a.to_le_bytes());
        v.extend_from_slice(&b.to_le_bytes());
        v.extend_from_slice(&[0; 40]); // pad to the 64-byte convention
        v
    }

    #[test]
    fn ctswap_swaps_when_condition_set() {
        let trace = run(&ctswap(), &ctswap_args(1, 7, 9), &VmConfig::default());
        assert_eq!(trace.exit, Some(0));
        assert_eq!(&trace.out[..8], &9u64.to_le_bytes());
        assert_eq!(&trace.out[8..], &7u64.to_le_bytes());
    }

    #[test]
    fn ctswap_keeps_order_when_condition_clear() {
        let trace = run(&ctswap(), &ctswap_args(0, 7, 9), &VmConfig::default());
        assert_eq!(&trace.out[..8], &7u64.to_le_bytes());
        assert_eq!(&trace.out[8..], &9u64.to_le_bytes());
    }

    #[test]
    fn transformed_ctswap_matches_original() {
        let p = ctswap();
        for mode in [PolicyMode::Annotated, PolicyMode::AllSecret] {
            let policy = Policy::new(mode, false, crate::runtime::DEFAULT_PREFIX).unwrap();
            let q = transform_program(&p, &policy).unwrap();
            for (cond, a, b) in [(1, 7, 9), (0, 7, 9), (3, 0xffff_ffff_ffff_ffff, 1)] {
                let args = ctswap_args(cond, a, b);
                let t0 = run(&p, &args, &VmConfig::default());
                let t1 = run(&q, &args, &VmConfig::default());
                assert_eq!(t0.out, t1.out, "mode {mode:?} diverged");
                assert_eq!(t0.exit, t1.exit);
            }
        }
    }

    #[test]
    fn raw_load_of_tagged_address_faults_noncanonical() {
        let p = parse(
            "fn main() {\n  %p = call ptr @ss_secret_malloc(i64 8)\n  %v = load i64, ptr %p, align 8\n  ret i64 %v\n}\n",
        );
        let trace = run(&p, &[], &VmConfig::default());
        let fault = trace.fault.expect("must fault");
        assert!(
            matches!(fault.kind, FaultKind::NonCanonicalAccess { addr } if addr >> 63 == 1),
            "got {fault:?}"
        );
    }

    #[test]
    fn unmapped_access_faults() {
        let p = parse("fn main() {\n  %p = gep i8, ptr 0x999000, 0\n  %v = load i64, ptr %p, align 8\n  ret i64 %v\n}\n");
        let trace = run(&p, &[], &VmConfig::default());
        assert!(matches!(trace.fault.unwrap().kind, FaultKind::Unmapped { .. }));
    }

    #[test]
    fn step_limit_is_a_distinct_fault() {
        let p = parse("fn main() {\nentry:\n  condbr 1, entry, out\nout:\n  ret i64 0\n}\n");
        let cfg = VmConfig { step_limit: 1000, ..Default::default() };
        let trace = run(&p, &[], &cfg);
        assert_eq!(trace.fault.unwrap().kind, FaultKind::StepLimit);
    }

    #[test]
    fn ss_store_taints_data_bytes_but_not_prefix() {
        let p = parse(
            "fn main() {\n  %p = call ptr @ss_secret_malloc(i64 8)\n  %v = const i64 0x1122334455667788\n  call void @ss_store64(ptr %p, i64 %v)\n  ret i64 0\n}\n",
        );
        let mut seen = false;
        run_with_observer(&p, &[], &VmConfig::default(), |img, point| {
            if point != AuditPoint::End {
                return;
            }
            seen = true;
            let orig = crate::mem::SECRET_HEAP_BASE;
            let shadow = crate::mem::SHADOW_BASE;
            for base in [orig, shadow] {
                for i in 0..4 {
                    assert!(img.peek_byte(base + i).1, "data byte {i} tainted");
                }
                for i in 4..8 {
                    assert!(!img.peek_byte(base + i).1, "prefix byte {i} untainted");
                }
            }
        });
        assert!(seen);
    }

    #[test]
    fn plain_store_of_constant_is_untainted() {
        let p = parse(
            "fn main() {\n  %s = alloca i64, 1, align 8\n  store i64 42, ptr %s, align 8\n  ret i64 0\n}\n",
        );
        let trace = run(&p, &[], &VmConfig::default());
        let ev = trace.store_events.last().unwrap();
        assert!(!ev.split && !ev.value_tainted && !ev.designated_target);
    }

    #[test]
    fn secret_derived_value_stays_tainted_through_arithmetic() {
        let p = parse(
            "fn main() {\n  %k = call ptr @secret_malloc(i64 8)\n  %v = load i64, ptr %k, align 8\n  %m = xor i64 %v, 0x1234\n  %s = alloca i64, 1, align 8\n  store i64 %m, ptr %s, align 8\n  ret i64 0\n}\n",
        );
        let trace = run(&p, &[], &VmConfig::default());
        let ev = trace.store_events.last().unwrap();
        assert!(ev.value_tainted, "conservative OR through xor");
        assert!(!ev.designated_target);
    }

    #[test]
    fn uninitialized_reads_are_warned_and_zero() {
        let p = parse(
            "fn main() {\n  %s = alloca i64, 1, align 8\n  %v = load i64, ptr %s, align 8\n  ret i64 %v\n}\n",
        );
        let trace = run(&p, &[], &VmConfig::default());
        assert_eq!(trace.exit, Some(0));
        assert!(trace.uninit_reads >= 8);
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        let p = ctswap();
        let args = ctswap_args(1, 0xdead, 0xbeef);
        let a = run(&p, &args, &VmConfig::default());
        let b = run(&p, &args, &VmConfig::default());
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.out, b.out);
        assert_eq!(a.icount_by_opcode, b.icount_by_opcode);
    }

    #[test]
    fn declassify_clears_taint_on_output_buffer() {
        let p = parse(
            "fn main() {\n  %p = call ptr @ss_secret_malloc(i64 8)\n  %v = const i64 0xabcdef\n  call void @ss_store64(ptr %p, i64 %v)\n  %d = alloca i64, 1, align 8\n  call void @ss_declassify(ptr %d, ptr %p, i64 8)\n  %r = load i64, ptr %d, align 8\n  ret i64 %r\n}\n",
        );
        let mut checked = false;
        let trace = run_with_observer(&p, &[], &VmConfig::default(), |img, point| {
            if point == AuditPoint::End {
                checked = true;
                // the declassified stack slot holds plain untainted bytes
                let (start, _) = img.range_containing(crate::mem::STACK_TOP - 8).unwrap();
                for i in 0..8 {
                    assert!(!img.peek_byte(start + i).1);
                }
            }
        });
        assert!(checked);
        assert_eq!(trace.exit, Some(0xabcdef));
    }

    #[test]
    fn exit_value_flows_from_ret() {
        let p = parse("fn main() { ret i64 0x2a }");
        assert_eq!(run(&p, &[], &VmConfig::default()).exit, Some(0x2a));
    }

    #[test]
    fn user_function_calls_work() {
        let p = parse(
            "fn add3(%x: i64) {\n  %r = add i64 %x, 3\n  ret i64 %r\n}\nfn main() {\n  %v = call i64 @add3(i64 39)\n  ret i64 %v\n}\n",
        );
        assert_eq!(run(&p, &[], &VmConfig::default()).exit, Some(42));
    }
}

//! Scoped flush-to-zero for subnormal floats.
//!
//! Saturated softmax outputs push gradients below the smallest normal
//! float. On x86 every arithmetic operation touching such a value takes a
//! slow microcode path, which made noise-model training about twice as slow.
//! The guard switches the current thread to flush-to-zero and
//! denormals-are-zero and restores the previous mode on drop. It wraps the
//! convolution forward pass and `Graph::backward`, so results do not depend
//! on the caller's floating point mode.

pub(crate) struct FlushDenormals {
    #[cfg_attr(not(any(target_arch = "x86_64", target_arch = "aarch64")), allow(dead_code))]
    saved: u64,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    pub(crate) fn new() -> Self {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr/ldmxcsr only touch the SSE control register of
        // the current thread; bits 6 (DAZ) and 15 (FTZ) change rounding of
        // subnormals only.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
            let set = csr | 0x8040;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &set, options(nostack, readonly));
        }
        Self { saved: csr as u64 }
    }

    #[cfg(target_arch = "aarch64")]
    pub(crate) fn new() -> Self {
        let fpcr: u64;
        // SAFETY: FPCR is per-thread; bit 24 (FZ) flushes subnormals.
        unsafe {
            std::arch::asm!("mrs {}, fpcr", out(reg) fpcr, options(nomem, nostack));
            std::arch::asm!("msr fpcr, {}", in(reg) fpcr | (1 << 24), options(nomem, nostack));
        }
        Self { saved: fpcr }
    }

    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    pub(crate) fn new() -> Self {
        Self { saved: 0 }
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        {
            let csr = self.saved as u32;
            // SAFETY: restores the value read in `new`.
            unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly)) };
        }
        #[cfg(target_arch = "aarch64")]
        {
            // SAFETY: restores the value read in `new`.
            unsafe { std::arch::asm!("msr fpcr, {}", in(reg) self.saved, options(nomem, nostack)) };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flushes_inside_and_restores_after() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!(tiny * half > 0.0);
        {
            let _guard = FlushDenormals::new();
            #[cfg(any(target_arch = "x86_64", target_arch = "aarch64"))]
            assert_eq!(std::hint::black_box(tiny) * std::hint::black_box(half), 0.0);
        }
        assert!(std::hint::black_box(tiny) * std::hint::black_box(half) > 0.0);
    }
}

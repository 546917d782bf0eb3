use gfk_core::eval::alloc::PeakAlloc;

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

fn main() {
    gfk_core::eval::alloc::retain_freed_memory();
    std::process::exit(gfk_core::cli::run_command(std::env::args_os()));
}

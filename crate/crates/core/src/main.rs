fn main() {
    std::process::exit(mum_core::cli::dispatch(std::env::args_os()));
}

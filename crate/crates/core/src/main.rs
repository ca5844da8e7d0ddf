fn main() {
    let code = focused_kv::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}

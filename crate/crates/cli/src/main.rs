fn main() -> std::process::ExitCode {
    let code = prefopt_cli::parse_and_dispatch(std::env::args_os());
    std::process::ExitCode::from(code as u8)
}

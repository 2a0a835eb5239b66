/** An unterminated comment that makes this file unreadable.
public class Broken {

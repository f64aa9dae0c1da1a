package fx;

public class OverridesHashCode {
    public int hashCode() { return 7; }
}
